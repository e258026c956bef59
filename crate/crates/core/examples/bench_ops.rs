// scratch: per-op timings at training shapes
use pcqa::diffcore::{NdArray, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn time_op(name: &str, reps: usize, f: impl Fn() -> ()) {
    let s = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{name:28} {:8.3} ms", s.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g48 = NdArray::randn(&mut rng, &[48, 65, 32], 1.0);
    let qkv_w = NdArray::randn(&mut rng, &[32, 96], 0.2);
    let q = NdArray::randn(&mut rng, &[48, 4, 65, 8], 1.0);
    let scores = NdArray::randn(&mut rng, &[48, 4, 65, 65], 1.0);
    let patches = NdArray::randn(&mut rng, &[48, 64, 192], 0.3);
    let pe = NdArray::randn(&mut rng, &[192, 32], 0.1);
    let mlp_in = NdArray::randn(&mut rng, &[48, 65, 32], 1.0);
    let w1 = NdArray::randn(&mut rng, &[32, 128], 0.2);
    let h128 = NdArray::randn(&mut rng, &[48, 65, 128], 1.0);

    time_op("qkv matmul (3120x32x96)", 50, || {
        let t = Tape::new();
        let a = t.constant(g48.clone());
        let b = t.constant(qkv_w.clone());
        let _ = t.matmul(a, b).unwrap();
    });
    time_op("patch embed (3072x192x32)", 50, || {
        let t = Tape::new();
        let a = t.constant(patches.clone());
        let b = t.constant(pe.clone());
        let _ = t.matmul(a, b).unwrap();
    });
    time_op("attn scores nt (192 slices)", 50, || {
        let t = Tape::new();
        let a = t.constant(q.clone());
        let b = t.constant(q.clone());
        let _ = t.matmul_nt(a, b).unwrap();
    });
    time_op("attn apply (192 slices)", 50, || {
        let t = Tape::new();
        let a = t.constant(scores.clone());
        let b = t.constant(q.clone());
        let _ = t.matmul(a, b).unwrap();
    });
    time_op("softmax (48,4,65,65)", 50, || {
        let t = Tape::new();
        let a = t.constant(scores.clone());
        let _ = t.softmax_lastdim(a).unwrap();
    });
    time_op("layer_norm (48,65,32)", 50, || {
        let t = Tape::new();
        let a = t.constant(g48.clone());
        let gn = t.constant(NdArray::filled(&[32], 1.0));
        let bs = t.constant(NdArray::zeros(&[32]));
        let _ = t.layer_norm(a, gn, bs, 1e-5).unwrap();
    });
    time_op("gelu (48,65,128)", 50, || {
        let t = Tape::new();
        let a = t.constant(h128.clone());
        let _ = t.gelu(a).unwrap();
    });
    time_op("mlp mm (3120x32x128)", 50, || {
        let t = Tape::new();
        let a = t.constant(mlp_in.clone());
        let b = t.constant(w1.clone());
        let _ = t.matmul(a, b).unwrap();
    });
    time_op("permute (48,65,4,8)->", 50, || {
        let t = Tape::new();
        let a = t.constant(NdArray::randn(&mut ChaCha8Rng::seed_from_u64(2), &[48, 65, 4, 8], 1.0));
        let _ = t.permute_axes(a, &[0, 2, 1, 3]).unwrap();
    });
    time_op("narrow (48,65,96)->32", 50, || {
        let t = Tape::new();
        let a = t.constant(NdArray::randn(&mut ChaCha8Rng::seed_from_u64(3), &[48, 65, 96], 1.0));
        let _ = t.narrow(a, 2, 0, 32).unwrap();
    });
    time_op("reshape (48,65,96)", 50, || {
        let t = Tape::new();
        let a = t.constant(NdArray::randn(&mut ChaCha8Rng::seed_from_u64(4), &[48, 65, 96], 1.0));
        let _ = t.reshape(a, vec![3120, 96]).unwrap();
    });
    time_op("add (48,65,32)", 50, || {
        let t = Tape::new();
        let a = t.constant(g48.clone());
        let b = t.constant(mlp_in.clone());
        let _ = t.add(a, b).unwrap();
    });
    time_op("scores softmax bwd shape", 50, || {
        let t = Tape::new();
        let a = t.leaf(scores.clone());
        let sm = t.softmax_lastdim(a).unwrap();
        let m = t.mean_all(sm).unwrap();
        let _ = t.backward(m).unwrap();
    });
}
