//! MLE then RL fine-tuning on a synthetic copy task.
//!
//! ```text
//! cargo run --release -p seqrl-core --example copy_task
//! ```

use std::sync::Arc;

use seqrl::corpus::parallel_from_lines;
use seqrl::model::ModelConfig;
use seqrl::rltrain::{train, TrainConfig, TrainMode};
use seqrl::toy::{ToyKind, ToyTask};

fn main() -> seqrl::Result<()> {
    let task = ToyTask::new(ToyKind::Copy, 8, 1, 8);
    let (sv, tv) = task.vocabs();
    let (sv, tv) = (Arc::new(sv), Arc::new(tv));
    let (s, t) = task.parallel(2000, 1);
    let train_set = parallel_from_lines(&s, &t, sv.clone(), tv.clone(), 8)?;
    let (s, t) = task.parallel(200, 2);
    let dev = parallel_from_lines(&s, &t, sv.clone(), tv.clone(), 8)?;

    let model = ModelConfig {
        embed_dim: 16,
        hidden_dim: 32,
        max_decode_len: 12,
        ..ModelConfig::new(sv.len(), tv.len())
    };
    let mle = TrainConfig {
        lr_mle: 1e-2,
        max_epochs: 1000,
        max_steps: Some(2000),
        eval_every: 100,
        max_tokens: 200,
        max_decode_len: 12,
        ..TrainConfig::default()
    };
    let mle_run = train(&model, &mle, TrainMode::Mle, &train_set, &dev, None)?;
    println!("MLE best dev BLEU {:.2}", mle_run.report.best_dev_bleu().unwrap_or(0.0));

    let rl = TrainConfig {
        max_epochs: 20,
        max_steps: None,
        lr_rl: 1e-3,
        max_tokens: 1000,
        ..mle
    };
    let rl_run = train(&model, &rl, TrainMode::Rl, &train_set, &dev, Some(mle_run.best))?;
    for r in &rl_run.report.records {
        println!(
            "step {:>4}  dev BLEU {:6.2}  mean reward {:.3}",
            r.step,
            r.dev_bleu,
            r.mean_reward.unwrap_or(0.0)
        );
    }
    Ok(())
}
