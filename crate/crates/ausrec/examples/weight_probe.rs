// Direction probe: harmful social tasks vs a helpful shared-item task.
use ausrec::sparse::{Dataset, SparseMatrix};
use ausrec::trainer::{Hyperparams, Mode, Trainer};
use ausrec::weightnet::WeightNetArch;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let (users, items, blocks) = (120usize, 160usize, 4usize);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut r = Vec::new();
    for u in 0..users {
        let b = u * blocks / users;
        let (lo, hi) = (b * items / blocks, (b + 1) * items / blocks);
        for _ in 0..12 {
            r.push((u, rng.random_range(lo..hi)));
        }
    }
    // Social edges only ACROSS blocks: the social tasks pull users with
    // different preferences together.
    let mut s = Vec::new();
    for u in 0..users {
        for _ in 0..4 {
            let v = rng.random_range(0..users);
            if v != u && (u * blocks / users) != (v * blocks / users) {
                s.push((u, v));
                s.push((v, u));
            }
        }
    }
    let d = Dataset::new(
        users,
        items,
        SparseMatrix::from_pairs(users, items, &r).unwrap(),
        SparseMatrix::from_pairs(users, users, &s).unwrap(),
    )
    .unwrap();

    let hp = Hyperparams {
        batch_size: 256,
        lr: 0.02,
        meta_lr: 0.01,
        l2: 1e-5,
        dim: 16,
        k_layers: 2,
        arch: WeightNetArch::parse("8-64-1").unwrap(),
        epochs: 60,
        meta_fraction: 0.1,
        patience: 1000,
        seed: 4,
    };
    let mut trainer = Trainer::new(&d, hp, Mode::Full).unwrap();
    let steps = trainer.steps_per_epoch();
    for _ in 0..60 {
        for _ in 0..steps {
            trainer.step().unwrap();
        }
    }
    let log = trainer.weight_log();
    let tail = &log[log.len() - log.len() / 10..];
    println!("final mean weights over the last 10% of steps:");
    let tasks: Vec<_> = log[0].weights.iter().map(|&(t, _)| t).collect();
    for task in tasks {
        let vals: Vec<f64> = tail
            .iter()
            .filter_map(|e| e.weights.iter().find(|(t, _)| *t == task).map(|&(_, w)| w))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!("  {task}: {mean:.4}");
    }
}
