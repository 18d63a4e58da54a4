use clap_core::actvae::*;
use clap_core::autodiff::{Tape, Tensor};
use clap_core::data::{read_dataset, write_dataset, sample_batch};
use clap_core::sim::*;

fn main() {
    let cfg = WorldConfig::default();
    let mut train_eps = Vec::new();
    let mut hold_eps = Vec::new();
    for s in 0..120u64 {
        let t = Task { kind: TaskKind::PickPlace, target_type: (s % 4) as usize, zone: ((s / 4) % 4) as usize };
        train_eps.push(generate_episode(&cfg, t, s, Domain::Robot).unwrap());
    }
    for s in 0..30u64 {
        let t = Task { kind: TaskKind::PickPlace, target_type: ((s + 2) % 4) as usize, zone: ((s / 3) % 4) as usize };
        hold_eps.push(generate_episode(&cfg, t, 10_000 + s, Domain::Robot).unwrap());
    }
    let dir = std::path::Path::new("/tmp/exp_ds3");
    let _ = std::fs::remove_dir_all(dir);
    write_dataset(&train_eps, &dir.join("train"), &cfg, 32, 1).unwrap();
    write_dataset(&hold_eps, &dir.join("hold"), &cfg, 32, 2).unwrap();
    let train = read_dataset(&dir.join("train")).unwrap();
    let hold = read_dataset(&dir.join("hold")).unwrap();

    let mcfg = ActVaeConfig::default();
    let tc = ActVaeTrainConfig { steps: 6000, batch: 16, seed: 7, lr: 1e-3, warmup: 200, ..Default::default() };
    let (model, _) = train_actvae(&train, mcfg, &tc).unwrap();

    for (name, ds) in [("train", &train), ("hold", &hold)] {
        let b = sample_batch(ds, 1.0, 256, 99).unwrap();
        let chunks = b.action_chunks.unwrap();
        let recon = model.reconstruct(&chunks);
        // continuous recon
        let mut tape = Tape::new();
        let cv = tape.leaf(chunks.clone());
        let ze = model.encode(&mut tape, cv);
        let rc = model.decode(&mut tape, ze);
        let cont = tape.value(rc).data().to_vec();
        let (bs, h, da) = (256usize, 32usize, 4usize);
        let mut wq: Vec<(f64, usize)> = Vec::new();
        let mut wc: Vec<f64> = Vec::new();
        for w in 0..bs {
            let mut eq = 0.0; let mut ec = 0.0;
            for i in w*h*da..(w+1)*h*da {
                eq += (chunks.data()[i] - recon.data()[i]).powi(2);
                ec += (chunks.data()[i] - cont[i]).powi(2);
            }
            wq.push((eq / (h*da) as f64, w));
            wc.push(ec / (h*da) as f64);
        }
        wq.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mean_q: f64 = wq.iter().map(|x| x.0).sum::<f64>() / bs as f64;
        let mean_c: f64 = wc.iter().sum::<f64>() / bs as f64;
        println!("[{name}] quant mse={:.6} cont mse={:.6} | quant p50={:.6} p90={:.6} p99={:.6}", mean_q, mean_c, wq[128].0, wq[230].0, wq[253].0);
        // worst window: quant vs continuous error + subtask info
        let worst = wq[255].1;
        println!("[{name}] worst win quant={:.4} cont={:.4} epi={} t={}", wq[255].0, wc[worst], b.episode_idx[worst], b.t_idx[worst]);
        if name == "hold" {
            let w = worst;
            for dim in 0..4 {
                let orig: Vec<f64> = (0..h).map(|t| (chunks.data()[(w*h+t)*da+dim]*100.0).round()/100.0).collect();
                let rec: Vec<f64> = (0..h).map(|t| (recon.data()[(w*h+t)*da+dim]*100.0).round()/100.0).collect();
                println!("dim{dim} orig: {orig:?}");
                println!("dim{dim} rec : {rec:?}");
            }
        }
    }
    let used = model.codebook.usage_counts.iter().filter(|&&c| c > 0).count();
    println!("codebook used: {used}/{} (last window)", model.codebook.k);
}
