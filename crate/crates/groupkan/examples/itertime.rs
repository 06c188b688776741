use groupkan::layers::*;
use groupkan::model::{build, GroupKanConfig, Mode};
use groupkan::spline::SplineGrid;
use groupkan::tensor::ops::Activation;
use groupkan::tensor::{ops, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn timeit(name: &str, mut f: impl FnMut()) {
    f(); // warm
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        f();
    }
    println!("{name:30} {:?}", t0.elapsed() / n);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid = SplineGrid::default_kan();

    // encoder stage shapes (batch 8, 64x64 input, tiny preset)
    let x0 = Tensor::randn(&[8, 1, 64, 64], 1.0, &mut rng).as_param();
    let enc1 = ConvBlock::new(1, 4, Activation::Relu, &mut rng);
    timeit("enc1 conv block @64^2", || {
        let t = Tape::new();
        enc1.forward(&t, &x0, true).unwrap();
    });

    let x1 = Tensor::randn(&[8, 4, 32, 32], 1.0, &mut rng).as_param();
    let enc2 = ConvBlock::new(4, 8, Activation::Relu, &mut rng);
    timeit("enc2 conv block @32^2", || {
        let t = Tape::new();
        enc2.forward(&t, &x1, true).unwrap();
    });

    let x2 = Tensor::randn(&[8, 8, 16, 16], 1.0, &mut rng).as_param();
    let enc3 = ConvBlock::new(8, 32, Activation::Relu, &mut rng);
    timeit("enc3 conv block @16^2", || {
        let t = Tape::new();
        enc3.forward(&t, &x2, true).unwrap();
    });

    // tok block at C2=32, input 32ch 8x8
    let x3 = Tensor::randn(&[8, 32, 8, 8], 1.0, &mut rng).as_param();
    let tok1 = TokKanBlock {
        embed: PatchEmbedding::new(32, 32, &mut rng),
        act: EmbedActivation::Gka(
            GroupedKanActivation::new(32, 4, GkaMode::SharedPerGroup, grid, Activation::Silu, &mut rng)
                .unwrap(),
        ),
        layers: (0..2)
            .map(|_| {
                GroupedKanTransform::new(32, 4, grid, Activation::Silu, GktOptions::default(), &mut rng)
                    .unwrap()
            })
            .collect(),
    };
    timeit("tok1 block (C2=32, 8x8->4x4)", || {
        let t = Tape::new();
        tok1.forward(&t, &x3).unwrap();
    });

    // gka alone
    let tokens = Tensor::randn(&[8, 16, 32], 0.5, &mut rng).as_param();
    let gka = GroupedKanActivation::new(32, 4, GkaMode::SharedPerGroup, grid, Activation::Silu, &mut rng).unwrap();
    timeit("gka alone (8x16x32)", || {
        let t = Tape::new();
        gka.forward(&t, &tokens).unwrap();
    });

    // gkt alone
    let gkt = GroupedKanTransform::new(32, 4, grid, Activation::Silu, GktOptions::default(), &mut rng).unwrap();
    timeit("gkt layer (8x16x32)", || {
        let t = Tape::new();
        gkt.forward(&t, &tokens, (4, 4)).unwrap();
    });

    // decoder stage equivalents: two conv blocks + fuse at various res
    for (cin, cout, hw) in [(64usize, 32usize, 2usize), (32, 32, 4), (32, 8, 8), (8, 4, 16)] {
        let xa = Tensor::randn(&[8, cin, hw, hw], 1.0, &mut rng).as_param();
        let ca = ConvBlock::new(cin, cin, Activation::Relu, &mut rng);
        let cb = ConvBlock::new(cin, cout, Activation::Relu, &mut rng);
        let fu = FuseConv::new(2 * cout, cout, Activation::Relu, &mut rng);
        let skip = Tensor::randn(&[8, cout, 2 * hw, 2 * hw], 1.0, &mut rng).as_param();
        timeit(&format!("dec {cin}->{cout} @{hw}^2"), || {
            let t = Tape::new();
            let a = ca.forward(&t, &xa, true).unwrap();
            let b = cb.forward(&t, &a, true).unwrap();
            let up = ops::upsample_nearest2(&t, &b).unwrap();
            let cat = ops::concat(&t, &[&up, &skip], 1).unwrap();
            fu.forward(&t, &cat, true).unwrap();
        });
    }

    let d5in = Tensor::randn(&[8, 4, 32, 32], 1.0, &mut rng).as_param();
    let dec5 = ConvBlock::new(4, 4, Activation::Relu, &mut rng);
    timeit("dec5 conv @32^2", || {
        let t = Tape::new();
        dec5.forward(&t, &d5in, true).unwrap();
    });

    // full model reference
    let cfg = GroupKanConfig::tiny();
    let net = build(&cfg, 0).unwrap();
    let xfull = Tensor::randn(&[8, 1, 64, 64], 1.0, &mut rng);
    timeit("full forward train", || {
        let t = Tape::new();
        net.forward(&t, &xfull, Mode::Train).unwrap();
    });
}
