use neurstt::metrics::{auc_family, f1, iou, roc3d};
use neurstt::solver::{run, SolverConfig};
use neurstt::synth::{generate, SynthConfig};

#[test]
fn detection_probe() {
    let synth = SynthConfig::default();
    let (d, gt) = generate::<f64>(&synth).unwrap();
    let cfg = SolverConfig::<f64> {
        max_iterations: 1000,
        seed: 11,
        ..SolverConfig::default()
    };
    let start = std::time::Instant::now();
    let result = run(&d, &cfg).unwrap();
    let iou_v = iou(&result.masks, &gt).unwrap();
    let scores = f1(&result.masks, &gt).unwrap();
    let aucs = auc_family(&roc3d(&result.target, &gt, 256).unwrap());
    let resid = d.sub(&result.background).unwrap();
    let in_band = resid.data().iter().filter(|v| v.abs() <= 0.1).count() as f64 / resid.len() as f64;
    let h = &result.loss_history;
    println!(
        "elapsed {:?}  IoU {iou_v:.4}  F1 {:.4}  AUC_roc {:.4}  AUC_tau_fpr {:.5}  in-band {in_band:.3}",
        start.elapsed(), scores.f1, aucs.auc_roc, aucs.auc_tau_fpr
    );
    println!(
        "loss: L0 {:.0}  L100 {:.0}  Lend {:.0} (bg {:.1} tgt {:.1} tv {:.2})",
        h[0].total, h[99].total, h.last().unwrap().total,
        h.last().unwrap().background, h.last().unwrap().target, h.last().unwrap().tv
    );
}
