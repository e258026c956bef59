// scratch: diagnose one-fold recovery — components, train vs test agreement
use pcqa::model::ModelConfig;
use pcqa::pointcloud::{synthesize_corpus, CorpusConfig};
use pcqa::training::{evaluate_fold, kfold_split, train, TrainConfig, ViewCache};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let corpus = synthesize_corpus(&CorpusConfig::default()).unwrap();
    let mut tcfg = TrainConfig::default();
    tcfg.epochs = epochs;
    tcfg.learning_rate = lr;
    let mcfg = ModelConfig::default();
    let splits = kfold_split(&corpus, tcfg.folds, tcfg.seed).unwrap();
    let (train_idx, test_idx) = &splits[0];

    let mut cache = ViewCache::new(corpus.len(), &tcfg);
    let t0 = Instant::now();
    let outcome = train(&mcfg, &tcfg, &corpus, train_idx, &mut cache, None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    let mut per_epoch = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); tcfg.epochs];
    for r in &outcome.trace {
        let e = &mut per_epoch[r.epoch];
        e.0 += r.l_emd;
        e.1 += r.l_quan;
        e.2 += r.l_con;
        e.3 += 1;
    }
    for (e, (emd, quan, con, n)) in per_epoch.iter().enumerate() {
        if e % 10 == 0 || e == tcfg.epochs - 1 {
            let n = *n as f64;
            println!(
                "epoch {e:2}: emd {:.4} quan {:.4} con {:.4}",
                emd / n, quan / n, con / n
            );
        }
    }
    println!("best epoch {} | logit scale {:.3}", outcome.best_epoch, outcome.best_model.logit_scale.value.item());

    let (train_rep, _) =
        evaluate_fold(&outcome.best_model, &tcfg, &corpus, train_idx, &mut cache).unwrap();
    let (test_rep, rows) =
        evaluate_fold(&outcome.best_model, &tcfg, &corpus, test_idx, &mut cache).unwrap();
    println!(
        "TRAIN srcc {:.4} plcc {:.4} | TEST srcc {:.4} plcc {:.4} rmse {:.4} ({:.0}s)",
        train_rep.srcc, train_rep.plcc, test_rep.srcc, test_rep.plcc, test_rep.rmse, train_time
    );
    // per-level mean prediction on test
    let mut by_level = std::collections::BTreeMap::new();
    for (sid, pred, mos) in &rows {
        let s = &corpus[*sid];
        by_level
            .entry((s.kind.name(), s.level))
            .or_insert_with(Vec::new)
            .push((*pred, *mos));
    }
    for ((kind, level), v) in by_level {
        let mp: f64 = v.iter().map(|x| x.0).sum::<f64>() / v.len() as f64;
        let mm: f64 = v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
        println!("  {kind:12} L{level}: pred {mp:.3} true {mm:.2}");
    }
}
