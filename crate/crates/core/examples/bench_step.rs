// scratch benchmark: timing breakdown of one training-scale step
use pcqa::diffcore::{NdArray, Tape};
use pcqa::losses::{contrastive_loss_t, emd_loss_t, quantile_loss_t, total_loss_t, LossWeights};
use pcqa::model::{ModelConfig, QualityModel, VarRegistry};
use pcqa::alignment::OpinionScoreDistribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    println!("rayon threads: {}", rayon::current_num_threads());
    let config = ModelConfig::default();
    let mut model = QualityModel::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, m, n) = (8usize, 6usize, 64usize);
    let color = NdArray::randn(&mut rng, &[b * m, n, 192], 0.3);
    let depth = NdArray::randn(&mut rng, &[b * m, n, 64], 0.3);
    let anchors = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let truth = OpinionScoreDistribution::from_weights(vec![0.1, 0.2, 0.4, 0.2, 0.1], anchors.clone()).unwrap();
    let weights = LossWeights::default();

    let steps = 10;
    let (mut t_fwd, mut t_loss, mut t_bwd, mut t_apply) = (0.0f64, 0.0, 0.0, 0.0);
    for _ in 0..steps {
        let t = Tape::new();
        let mut registry = VarRegistry::new();
        let s0 = Instant::now();
        let out = model.forward_batch(&t, &mut registry, Some(&color), Some(&depth), b, m).unwrap();
        t_fwd += s0.elapsed().as_secs_f64();
        let s1 = Instant::now();
        let probs = out.osd_probs.unwrap();
        let mut emd_total = None;
        let mut quan_total = None;
        for i in 0..b {
            let row = t.narrow(probs, 0, i, 1).unwrap();
            let row = t.reshape(row, vec![5]).unwrap();
            let asc = t.reverse_lastdim(row).unwrap();
            let e = emd_loss_t(&t, asc, &anchors, &truth).unwrap();
            let q = quantile_loss_t(&t, asc, &anchors, &truth, &[0.25, 0.5, 0.75]).unwrap();
            emd_total = Some(match emd_total { Some(acc) => t.add(acc, e).unwrap(), None => e });
            quan_total = Some(match quan_total { Some(acc) => t.add(acc, q).unwrap(), None => q });
        }
        let emd = t.scale(emd_total.unwrap(), 1.0 / b as f64).unwrap();
        let quan = t.scale(quan_total.unwrap(), 1.0 / b as f64).unwrap();
        let cflat = t.reshape(out.color_tokens.unwrap(), vec![b * m, n * 32]).unwrap();
        let dflat = t.reshape(out.depth_tokens.unwrap(), vec![b * m, n * 32]).unwrap();
        let con = contrastive_loss_t(&t, cflat, dflat, weights.tau1, false).unwrap();
        let loss = total_loss_t(&t, emd, quan, Some(con), &weights).unwrap();
        t_loss += s1.elapsed().as_secs_f64();
        let s2 = Instant::now();
        let mut grads = t.backward(loss).unwrap();
        t_bwd += s2.elapsed().as_secs_f64();
        let s3 = Instant::now();
        model.zero_grads();
        registry.apply_gradients(&mut grads, &mut model);
        t_apply += s3.elapsed().as_secs_f64();
    }
    let k = steps as f64;
    println!("fwd {:.3}s loss {:.3}s bwd {:.3}s apply {:.3}s per step", t_fwd/k, t_loss/k, t_bwd/k, t_apply/k);
}
