use clap_core::autodiff::{Tape, Tensor};
use clap_core::nn::*;
use clap_core::rngs;
use std::time::Instant;

fn bench(name: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let iters = 200;
    for _ in 0..iters { f(); }
    println!("{name}: {:.3} ms", t0.elapsed().as_secs_f64()*1000.0/iters as f64);
}

fn main() {
    let mut rng = rngs::seeded(1);
    let mut ps = ParamSet::new();
    let mh = MultiHead::new(&mut ps, "mh", 64, 4, &mut rng);
    let x = Tensor::new(vec![16, 40, 64], (0..16*40*64).map(|i| ((i as f64)*0.01).sin()*0.2).collect());

    bench("mh.q_proj only", || { let mut t = Tape::new(); let v = t.leaf(x.clone()); let _ = mh.wq.forward(&mut t, &ps, 0, v); });
    bench("attention core (no proj)", || {
        let mut t = Tape::new();
        let q = t.leaf(x.clone()); let k = t.leaf(x.clone()); let v = t.leaf(x.clone());
        let cfg = AttentionConfig{num_heads:4, head_dim:16, causal:false, insulated:false};
        let _ = attention(&mut t, q, k, v, cfg);
    });
    bench("softmax [64,40,40] noncausal", || { let mut t = Tape::new(); let a = t.leaf(Tensor::new(vec![64, 40, 40], (0..64*40*40).map(|i| ((i as f64)*0.37).sin()).collect())); let _ = t.softmax(a, false); });
    bench("bmm_nt [64,40,16]x2", || {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(vec![64, 40, 16], vec![0.3; 64*40*16]));
        let b = t.leaf(Tensor::new(vec![64, 40, 16], vec![0.2; 64*40*16]));
        let s = t.bmm_nt(a, b);
        let c = t.leaf(Tensor::new(vec![64, 40, 16], vec![0.2; 64*40*16]));
        let _ = t.bmm(s, c);
    });
    bench("full mh", || { let mut t = Tape::new(); let v = t.leaf(x.clone()); let _ = mh.forward(&mut t, &ps, 0, v, v, false, false); });
}
