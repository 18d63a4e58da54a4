use clap_core::actvae::*;
use clap_core::data::{read_dataset, write_dataset, sample_batch};
use clap_core::autodiff::Tape;
use clap_core::sim::*;
use std::time::Instant;

fn main() {
    let cfg = WorldConfig::default();
    let mut train_eps = Vec::new();
    let mut hold_eps = Vec::new();
    // decouple type and zone via seed bits
    for s in 0..240u64 {
        let t = Task { kind: TaskKind::PickPlace, target_type: (s % 4) as usize, zone: ((s / 4) % 4) as usize };
        train_eps.push(generate_episode(&cfg, t, s, Domain::Robot).unwrap());
    }
    for s in 0..30u64 {
        let t = Task { kind: TaskKind::PickPlace, target_type: ((s + 2) % 4) as usize, zone: ((s / 3) % 4) as usize };
        hold_eps.push(generate_episode(&cfg, t, 10_000 + s, Domain::Robot).unwrap());
    }
    let dir = std::path::Path::new("/tmp/exp_ds");
    let _ = std::fs::remove_dir_all(dir);
    write_dataset(&train_eps, &dir.join("train"), &cfg, 32, 1).unwrap();
    write_dataset(&hold_eps, &dir.join("hold"), &cfg, 32, 2).unwrap();
    let train = read_dataset(&dir.join("train")).unwrap();
    let hold = read_dataset(&dir.join("hold")).unwrap();

    for (dm, lr, steps) in [(64usize, 1e-3f64, 5000usize)] {
        let mcfg = ActVaeConfig { d_model: dm, ..ActVaeConfig::default() };
        let tc = ActVaeTrainConfig { steps, batch: 16, seed: 7, lr, warmup: 200, ..Default::default() };
        let t0 = Instant::now();
        let (mut model, curve) = train_actvae(&train, mcfg, &tc).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        // decompose final loss on a fresh train batch
        let b = sample_batch(&train, 1.0, 64, 555).unwrap();
        let mut tape = Tape::new();
        let c = tape.leaf(b.action_chunks.unwrap());
        let l = model.loss(&mut tape, c).unwrap();
        println!("dm={dm} lr={lr} steps={steps}: {:.3}s/step total={:.5} rec={:.5} commit={:.5} cb={:.5}",
            dt / steps as f64,
            tape.value(l.total).item(), tape.value(l.rec).item(),
            tape.value(l.commit).item(), tape.value(l.codebook).item());
        let mse_h = eval_mse(&model, &hold, 256, 99).unwrap();
        let mse_t = eval_mse(&model, &train, 256, 99).unwrap();
        // continuous-path reconstruction (no quantizer): transformer capacity probe
        {
            let bb = sample_batch(&train, 1.0, 128, 777).unwrap();
            let ch = bb.action_chunks.unwrap();
            let mut tp = Tape::new();
            let cv = tp.leaf(ch.clone());
            let ze = model.encode(&mut tp, cv);
            let rec = model.decode(&mut tp, ze);
            let diff: f64 = ch.data().iter().zip(tp.value(rec).data()).map(|(a,b)| (a-b)*(a-b)).sum::<f64>() / ch.numel() as f64;
            println!("  continuous AE mse={diff:.6}");
            let hist = &model.codebook.usage_counts;
            let used = hist.iter().filter(|&&c| c>0).count();
            println!("  codebook: {used}/{} used in last window", hist.len());
        }
        println!("  train_mse={:.6} ({:.2} dB)  hold_mse={:.6} ({:.2} dB)  loss[end]={:.5}",
            mse_t, psnr(mse_t, 2.0).unwrap(), mse_h, psnr(mse_h, 2.0).unwrap(), curve[curve.len()-1]);
    }
}
