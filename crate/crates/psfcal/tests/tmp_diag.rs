use psfcal::chart::{render_chart, CircleGridSpec};
use psfcal::metrics::kernel_psnr;
use psfcal::sensor::{demosaic_bilinear, mosaic};
use psfcal::optics::{
    AberrationSpec, FieldPoly, GaussianComponent,
};
use psfcal::optim::{calibrate_patch, calibrate_with_target, OptimConfig};
use psfcal::sensor::CfaPattern;

#[test]
fn proxy_vs_true_target_red_channel() {
    let spec = CircleGridSpec {
        rows: 1,
        cols: 1,
        pitch: 64.0,
        radius: 20.0,
        margin: 0.0,
        dark_level: 0.1,
        bright_level: 0.9,
        supersample: 8,
    };
    let chart = render_chart(&spec, None).unwrap().image;
    // Corner-cell covariance of the benchmark lens, frozen as a constant field.
    let ab = AberrationSpec {
        kernel_side: 15,
        components: vec![
            GaussianComponent {
                amplitude: FieldPoly::constant(1.0),
                offset_x: FieldPoly::constant(0.0),
                offset_y: FieldPoly::constant(0.0),
                cov_xx: FieldPoly::constant(1.8556),
                cov_xy: FieldPoly::constant(0.2222),
                cov_yy: FieldPoly::constant(1.2556),
            },
            GaussianComponent {
                amplitude: FieldPoly::constant(0.2),
                offset_x: FieldPoly::constant(0.0),
                offset_y: FieldPoly::constant(0.0),
                cov_xx: FieldPoly::constant(2.2),
                cov_xy: FieldPoly::constant(0.0),
                cov_yy: FieldPoly::constant(2.2),
            },
        ],
        chroma: [0.94, 1.0, 1.06],
    };
    let field = psfcal::optics::synth_field(&ab, 1, 1, 3).unwrap();
    let rgb = chart.replicate(3).unwrap();
    let blurred = psfcal::optics::blur_field(&rgb, &field).unwrap();
    let raw = mosaic(&blurred, CfaPattern::Rggb).unwrap();
    let demo = demosaic_bilinear(&raw);

    let cfg = OptimConfig {
        kernel_side: 15,
        pyramid_levels: 3,
        iters_per_level: 300,
        channel: 0,
        seed: 5,
        ..OptimConfig::default()
    };
    let gt = field.kernel(0, 0, 0).unwrap();

    let ring_mass = |k: &psfcal::Kernel, lo: isize| -> f64 {
        let side = k.side() as isize;
        let r = side / 2;
        let mut m = 0.0;
        for y in 0..side {
            for x in 0..side {
                if (x - r).abs().max((y - r).abs()) >= lo {
                    m += k.data()[(y * side + x) as usize];
                }
            }
        }
        m
    };
    for (label, sw, iters) in [
        ("base sw=0.10 it=300", 0.10, 300usize),
        ("sw=0.02 it=300", 0.02, 300),
    ] {
        let c = OptimConfig {
            smooth_weight: sw,
            iters_per_level: iters,
            ..cfg.clone()
        };
        let r = calibrate_patch(&demo, &c).unwrap();
        println!(
            "{label}: {:.2} dB  est ring>=4 {:.2e} ring>=6 {:.2e}  gt ring>=4 {:.2e} ring>=6 {:.2e}",
            kernel_psnr(&r.kernel, gt).unwrap(),
            ring_mass(&r.kernel, 4),
            ring_mass(&r.kernel, 6),
            ring_mass(gt, 4),
            ring_mass(gt, 6)
        );
    }
    let with_truth = calibrate_with_target(&demo, &chart, &cfg).unwrap();
    println!(
        "true-target: {:.2} dB  est ring>=4 {:.2e} ring>=6 {:.2e}",
        kernel_psnr(&with_truth.kernel, gt).unwrap(),
        ring_mass(&with_truth.kernel, 4),
        ring_mass(&with_truth.kernel, 6)
    );

    // Full-field reproduction of the same corner cell.
    let spec3 = CircleGridSpec {
        rows: 3,
        cols: 3,
        pitch: 64.0,
        radius: 20.0,
        margin: 0.0,
        dark_level: 0.1,
        bright_level: 0.9,
        supersample: 8,
    };
    let chart3 = render_chart(&spec3, None).unwrap().image;
    let ab3 = AberrationSpec {
        kernel_side: 15,
        components: vec![
            GaussianComponent {
                amplitude: FieldPoly::constant(1.0),
                offset_x: FieldPoly::constant(0.0),
                offset_y: FieldPoly::constant(0.0),
                cov_xx: FieldPoly {
                    c0: 1.5,
                    cuu: 0.8,
                    ..Default::default()
                },
                cov_xy: FieldPoly {
                    cuv: 0.5,
                    ..Default::default()
                },
                cov_yy: FieldPoly {
                    c0: 0.9,
                    cvv: 0.8,
                    ..Default::default()
                },
            },
            GaussianComponent {
                amplitude: FieldPoly::constant(0.2),
                offset_x: FieldPoly::constant(0.0),
                offset_y: FieldPoly::constant(0.0),
                cov_xx: FieldPoly::constant(2.2),
                cov_xy: FieldPoly::constant(0.0),
                cov_yy: FieldPoly::constant(2.2),
            },
        ],
        chroma: [0.94, 1.0, 1.06],
    };
    let field3 = psfcal::optics::synth_field(&ab3, 3, 3, 3).unwrap();
    let rgb3 = chart3.replicate(3).unwrap();
    let blurred3 = psfcal::optics::blur_field(&rgb3, &field3).unwrap();
    let raw3 = mosaic(&blurred3, CfaPattern::Rggb).unwrap();
    let demo3 = demosaic_bilinear(&raw3);
    let patch = demo3.crop_replicated(0, 0, 64, 64);
    let gt3 = field3.kernel(0, 0, 0).unwrap();
    println!(
        "gt isolated vs gt field max-abs {:.2e}",
        gt.data()
            .iter()
            .zip(gt3.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    );
    println!(
        "demo isolated vs field patch max-abs {:.2e}",
        demo.data()
            .iter()
            .zip(patch.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    );
    let r3 = calibrate_patch(&patch, &cfg).unwrap();
    println!(
        "in-field corner ch0: {:.2} dB",
        kernel_psnr(&r3.kernel, gt3).unwrap()
    );

    // Same path but through 16-bit quantization, as the CLI round trip does.
    let mut raw_q = raw3.clone();
    for v in raw_q.image.data_mut() {
        *v = (*v * 65535.0).round().clamp(0.0, 65535.0) / 65535.0;
    }
    let demo_q = demosaic_bilinear(&raw_q);
    let patch_q = demo_q.crop_replicated(0, 0, 64, 64);
    let rq = calibrate_patch(&patch_q, &cfg).unwrap();
    println!(
        "in-field corner ch0 via u16: {:.2} dB",
        kernel_psnr(&rq.kernel, gt3).unwrap()
    );
    for (label, c) in [
        (
            "u16 sw=0.02",
            OptimConfig {
                smooth_weight: 0.02,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.02 lv=2 it=450",
            OptimConfig {
                smooth_weight: 0.02,
                pyramid_levels: 2,
                iters_per_level: 450,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.02 gw=0.5",
            OptimConfig {
                smooth_weight: 0.02,
                grad_weight: 0.5,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.02 gw=2.0",
            OptimConfig {
                smooth_weight: 0.02,
                grad_weight: 2.0,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.02 gw=2 lv=2 it=450",
            OptimConfig {
                smooth_weight: 0.02,
                grad_weight: 2.0,
                pyramid_levels: 2,
                iters_per_level: 450,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.02 gw=3",
            OptimConfig {
                smooth_weight: 0.02,
                grad_weight: 3.0,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.05 gw=2",
            OptimConfig {
                smooth_weight: 0.05,
                grad_weight: 2.0,
                ..cfg.clone()
            },
        ),
        (
            "u16 sw=0.10 gw=2",
            OptimConfig {
                grad_weight: 2.0,
                ..cfg.clone()
            },
        ),
    ] {
        let r = calibrate_patch(&patch_q, &c).unwrap();
        println!("{label}: {:.2} dB", kernel_psnr(&r.kernel, gt3).unwrap());
    }
}
