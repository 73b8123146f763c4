use roomfield_core::field::{Aabb, DensityBias, FieldConfig, RadianceField};
use roomfield_core::fit::fit_to_room;
use roomfield_core::geometry::Intrinsics;
use roomfield_core::metrics::{evaluate, held_out_poses};
use roomfield_core::prior::OracleRoom;
use roomfield_core::render::{Precision, RenderSettings};

fn main() {
    let room = OracleRoom::default();
    let cfg = FieldConfig {
        density_bias: DensityBias::Shell { strength: 8.0 },
        ..FieldConfig::desk(Aabb::cube(2.25))
    };
    let mut field = RadianceField::initialized(cfg, 1).unwrap();
    let steps: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().unwrap())
        .unwrap_or(1000);
    let t = std::time::Instant::now();
    let loss = fit_to_room(&mut field, &room, steps, 256, 3);
    println!("fit loss {loss} in {:?}", t.elapsed());
    let intr = Intrinsics::new(std::f64::consts::FRAC_PI_4, 64, 64).unwrap();
    let poses = held_out_poses(99, 8, 0.7, 0.5, intr);
    let settings = RenderSettings::new(64, 0.05, 6.93)
        .unwrap()
        .with_precision(Precision::Single);
    let r = evaluate(&field, &room, &settings, &poses).unwrap();
    println!(
        "psnr {:.2} depth_rms {:.3} reproj {:.4}",
        r.mean_psnr, r.depth_rms, r.reprojection_error
    );
}
