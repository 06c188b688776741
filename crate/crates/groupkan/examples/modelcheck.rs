use groupkan::ablate::{run_ablation, AblationAxis};
use groupkan::config::RunConfig;
use groupkan::data::ShapeKind;

fn main() {
    for (contrast, noise, epochs, count, res, kinds) in [
        (0.3, 0.45, 10usize, 120usize, 64usize, vec![ShapeKind::BlobUnion]),
        (0.3, 0.45, 16, 120, 64, vec![ShapeKind::BlobUnion]),
    ] {
        println!("== contrast {contrast} noise {noise} epochs {epochs} count {count} res {res} kinds {kinds:?}");
        for seed in [1u64, 2, 3] {
            let mut cfg = RunConfig::for_preset("tiny").unwrap();
            cfg.synthetic_count = count;
            cfg.synthetic_resolution = res;
            cfg.synthetic_contrast = contrast;
            cfg.synthetic_noise = noise;
            cfg.synthetic_kinds = kinds.clone();
            cfg.epochs = epochs;
            cfg.seed = seed;
            let t0 = std::time::Instant::now();
            let table = run_ablation(AblationAxis::GktComponents, &cfg).unwrap();
            let v: Vec<f64> = table.rows.iter().map(|r| r.val_iou).collect();
            let ordered = v[0] > v[1] && v[1] > v[2] && v[2] > v[3];
            println!(
                "  seed {seed}: full {:.3} no_pw {:.3} no_dw {:.3} no_gkt {:.3}  ordered={} [{:?}]",
                v[0], v[1], v[2], v[3], ordered, t0.elapsed()
            );
        }
    }
}
