// scratch: token/fused-feature norms at init and after a short train
use pcqa::model::{patches_from_views, ModelConfig, QualityModel};
use pcqa::pointcloud::{synthesize_corpus, CorpusConfig};
use pcqa::projection::CropMode;
use pcqa::training::{kfold_split, train, TrainConfig, ViewCache};

fn fnorm(model: &QualityModel, corpus: &[pcqa::pointcloud::CorpusSample], cache: &mut ViewCache, tcfg: &TrainConfig, idx: usize) -> (f64, f64) {
    let views = cache.get(corpus, idx).unwrap();
    let p = patches_from_views(&views.views, 8, tcfg.crop, CropMode::Center, 0, true, true).unwrap();
    let pred = model.predict_sample(&p).unwrap();
    let f = pred.fused;
    let n: f64 = f.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    // pi spread:
    use pcqa::encoders::{build_prompts, text_forward};
    let pool = model.prompts.insert_index().unwrap();
    let prompts = build_prompts(&model.prompts).unwrap();
    let mut pis = Vec::new();
    for pr in &prompts {
        let ft = text_forward(&model.text_encoder, pr, pool).unwrap();
        let dot: f64 = f.data().iter().zip(ft.data()).map(|(a, b)| a * b).sum();
        let nf: f64 = ft.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        pis.push(dot / (n * nf));
    }
    let spread = pis.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - pis.iter().cloned().fold(f64::INFINITY, f64::min);
    (n, spread)
}

fn main() {
    let corpus = synthesize_corpus(&CorpusConfig::default()).unwrap();
    let mut tcfg = TrainConfig::default();
    tcfg.epochs = 5;
    let mcfg = ModelConfig::default();
    let splits = kfold_split(&corpus, 5, tcfg.seed).unwrap();
    let mut cache = ViewCache::new(corpus.len(), &tcfg);
    let init_model = QualityModel::init(mcfg.clone()).unwrap();
    for idx in [0usize, 100, 191] {
        let (n, s) = fnorm(&init_model, &corpus, &mut cache, &tcfg, idx);
        println!("init   sample {idx:3}: |F_I| {n:8.2} pi spread {s:.5}");
    }
    let outcome = train(&mcfg, &tcfg, &corpus, &splits[0].0, &mut cache, None).unwrap();
    for idx in [0usize, 100, 191] {
        let (n, s) = fnorm(&outcome.model, &corpus, &mut cache, &tcfg, idx);
        println!("5 eps  sample {idx:3}: |F_I| {n:8.2} pi spread {s:.5}");
    }
}
