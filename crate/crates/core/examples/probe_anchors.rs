// scratch: how separated are the K textual features?
use pcqa::encoders::{build_prompts, text_forward};
use pcqa::model::{ModelConfig, QualityModel};

fn main() {
    let model = QualityModel::init(ModelConfig::default()).unwrap();
    let pool = model.prompts.insert_index().unwrap();
    let prompts = build_prompts(&model.prompts).unwrap();
    let feats: Vec<Vec<f64>> = prompts
        .iter()
        .map(|p| text_forward(&model.text_encoder, p, pool).unwrap().into_data())
        .collect();
    for i in 0..feats.len() {
        for j in (i + 1)..feats.len() {
            let dot: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = feats[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj: f64 = feats[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("cos(F_T_{i}, F_T_{j}) = {:.5}", dot / (ni * nj));
        }
    }
    let norms: Vec<f64> = feats
        .iter()
        .map(|f| f.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    println!("norms: {:?}", norms.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
}
