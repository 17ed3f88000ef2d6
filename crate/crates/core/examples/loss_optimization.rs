//! Builds the unsupervised objective over a small collection and runs a few
//! steps of plain gradient descent on the functional maps and universe
//! assignments, printing the per-term breakdown as it descends.

use shapecorr::config::PipelineConfig;
use shapecorr::loss::{desk_optimize, total_loss, CycleVariant, LossWeights, OptimizeVars};
use shapecorr::pipeline::{build_state, prepare_shape};
use shapecorr::synthetic;
use shapecorr::TriangleMesh;

fn main() -> shapecorr::Result<()> {
    let config = PipelineConfig {
        k_lb: 8,
        k_elas: 4,
        wks_dim: 16,
        graph_k: 2,
        tau: 1.0,
        ..Default::default()
    };
    let shapes = [0.25, 0.35, 0.45]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let m = synthetic::bumpy_sphere(3, 6, b);
            let named =
                TriangleMesh::new(m.vertices().to_vec(), m.faces().to_vec(), &format!("toy{i}"))?;
            prepare_shape(named, &config, None)
        })
        .collect::<shapecorr::Result<Vec<_>>>()?;

    let state = build_state(&shapes, &config)?;
    let weights = LossWeights::default();
    let report = total_loss(&state, &weights, CycleVariant::Frobenius)?;
    println!("initial objective:");
    println!(
        "  bijectivity {:.4}  orthogonality {:.4}  coupling {:.4}  cycle {:.4}  total {:.4}",
        report.bij, report.orth, report.couple, report.cycle, report.total
    );

    let (_, trace) =
        desk_optimize(state, &weights, CycleVariant::Frobenius, 40, 1e-2, OptimizeVars::Both)?;
    println!("{:>5} {:>10} {:>10} {:>10} {:>10} {:>10}", "step", "bij", "orth", "couple", "cycle", "total");
    for row in trace.iter().step_by(10) {
        println!(
            "{:>5} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            row.step, row.bij, row.orth, row.couple, row.cycle, row.total
        );
    }
    Ok(())
}
