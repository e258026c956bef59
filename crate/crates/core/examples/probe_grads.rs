// scratch: per-group gradient RMS from each loss term separately
use pcqa::diffcore::{NdArray, Tape};
use pcqa::losses::{contrastive_loss_t, emd_loss_t, quantile_loss_t, LossWeights};
use pcqa::model::{patches_from_views, ModelConfig, QualityModel, VarRegistry};
use pcqa::pointcloud::{synthesize_corpus, CorpusConfig};
use pcqa::projection::CropMode;
use pcqa::training::{TrainConfig, ViewCache};

fn grad_rms(model: &mut QualityModel, which: &str, corpus: &[pcqa::pointcloud::CorpusSample], cache: &mut ViewCache, tcfg: &TrainConfig) {
    let batch: Vec<usize> = (0..8).map(|i| i * 24).collect();
    let (b, m) = (batch.len(), tcfg.views);
    let mut per_sample = Vec::new();
    for &idx in &batch {
        let views = cache.get(corpus, idx).unwrap();
        per_sample.push(
            patches_from_views(&views.views, 8, tcfg.crop, CropMode::Random, idx as u64, true, true)
                .unwrap(),
        );
    }
    let mut cdat = Vec::new();
    let mut ddat = Vec::new();
    for p in &per_sample {
        cdat.extend_from_slice(p.color.as_ref().unwrap().data());
        ddat.extend_from_slice(p.depth.as_ref().unwrap().data());
    }
    let color = NdArray::from_vec(vec![b * m, 64, 192], cdat).unwrap();
    let depth = NdArray::from_vec(vec![b * m, 64, 64], ddat).unwrap();

    let t = Tape::new();
    let mut reg = VarRegistry::new();
    let out = model
        .forward_batch(&t, &mut reg, Some(&color), Some(&depth), b, m)
        .unwrap();
    let anchors = [1.0, 2.0, 3.0, 4.0, 5.0];
    let w = LossWeights::default();
    let loss = match which {
        "emd+quan" => {
            let probs = out.osd_probs.unwrap();
            let mut acc = None;
            for (bi, &idx) in batch.iter().enumerate() {
                let row = t.narrow(probs, 0, bi, 1).unwrap();
                let row = t.reshape(row, vec![5]).unwrap();
                let asc = t.reverse_lastdim(row).unwrap();
                let e = emd_loss_t(&t, asc, &anchors, &corpus[idx].osd_label).unwrap();
                let q = quantile_loss_t(&t, asc, &anchors, &corpus[idx].osd_label, &[0.25, 0.5, 0.75]).unwrap();
                let qs = t.scale(q, w.alpha).unwrap();
                let s = t.add(e, qs).unwrap();
                acc = Some(match acc { Some(a) => t.add(a, s).unwrap(), None => s });
            }
            t.scale(acc.unwrap(), 1.0 / b as f64).unwrap()
        }
        _ => {
            let cf = t.reshape(out.color_tokens.unwrap(), vec![b * m, 64 * 32]).unwrap();
            let df = t.reshape(out.depth_tokens.unwrap(), vec![b * m, 64 * 32]).unwrap();
            let con = contrastive_loss_t(&t, cf, df, w.tau1, false).unwrap();
            t.scale(con, w.beta).unwrap()
        }
    };
    let mut grads = t.backward(loss).unwrap();
    model.zero_grads();
    reg.apply_gradients(&mut grads, model);
    for name in ["color_vit.patch_embed_w", "color_vit.block1.qkv_w", "prompts.context", "logit_scale"] {
        let mut rms = None;
        model.visit_params(&mut |n, p| {
            if n == name {
                let v: f64 = p.grad.data().iter().map(|x| x * x).sum::<f64>() / p.grad.len() as f64;
                rms = Some(v.sqrt());
            }
        });
        println!("  {which:8} {name:28} grad rms {:.3e}", rms.unwrap());
    }
}

fn main() {
    let corpus = synthesize_corpus(&CorpusConfig::default()).unwrap();
    let tcfg = TrainConfig::default();
    let mut cache = ViewCache::new(corpus.len(), &tcfg);
    let mut model = QualityModel::init(ModelConfig::default()).unwrap();
    grad_rms(&mut model, "emd+quan", &corpus, &mut cache, &tcfg);
    grad_rms(&mut model, "beta*con", &corpus, &mut cache, &tcfg);
}
