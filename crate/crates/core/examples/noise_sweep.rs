//! Raw cosine AR@1 on the synthetic split across descriptor noise levels.
//!
//! Usage: `cargo run --release --example noise_sweep -- [seed]`

use std::collections::HashMap;

use pgat_core::inference::{rank_all, raw_cosine, summarize, GroundTruth, DEFAULT_RADIUS_M};
use pgat_core::pose_graph::KeynodeSet;
use pgat_core::synthdata::{generate, SynthConfig};

fn main() -> pgat_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(SynthConfig::toy().seed);
    for sigma in [0.0, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5] {
        let cfg = SynthConfig {
            descriptor_noise_sigma: sigma,
            seed,
            ..SynthConfig::toy()
        };
        let data = generate(&cfg)?;
        let keynodes = KeynodeSet::from_trajectories(&data.trajectories)?;
        let db_ids: Vec<u64> = data.database().iter().flat_map(|t| t.nodes.iter().map(|n| n.global_id)).collect();
        let query_ids: Vec<u64> = data.query().nodes.iter().map(|n| n.global_id).collect();
        let acc = raw_cosine(&query_ids, &db_ids, &keynodes)?;
        let truth = GroundTruth {
            positions: keynodes.iter().map(|n| (n.global_id, n.position)).collect::<HashMap<_, _>>(),
            db_ids: db_ids.clone(),
        };
        let summary = summarize(&rank_all(&acc, 25)?, &truth, DEFAULT_RADIUS_M)?;
        println!("sigma={sigma:.2} AR@1={:.3} AR@1%={:.3}", summary.ar1, summary.ar1_percent);
    }
    Ok(())
}
