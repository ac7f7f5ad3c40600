// scratch probe: full-model gradient check + per-layer gradient norms
use countloc::confmap::{multi_stage_loss, SigmaSchedule};
use countloc::dataset::{synthesize, SynthSpec};
use countloc::network::{Model, NetworkConfig};
use countloc::tensor::{gradient_check_at, Shape4, Tape, Tensor4};
use countloc::trainer::batch_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = NetworkConfig {
        input_size: 16,
        stages: 2,
        backbone_widths: [4, 4, 4],
        ppm_scales: vec![1, 2],
        ppm_channels: 4,
        stage_widths: [4, 6],
        stride: 8,
    };
    let model = Model::new(cfg.clone(), 123).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img_shape = Shape4::new(1, 3, 16, 16);
    let img = Tensor4::new(
        img_shape,
        (0..img_shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let gt: Vec<Tensor4> = (0..2)
        .map(|_| {
            Tensor4::new(
                Shape4::new(1, 1, 2, 2),
                (0..4).map(|_| rng.gen_range(0.05..0.95)).collect(),
            )
            .unwrap()
        })
        .collect();

    // gradient w.r.t. the input image
    let m2 = model.clone();
    let gtc = gt.clone();
    let f = move |tape: &mut Tape, v: countloc::tensor::Var| {
        let bound = m2.bind(tape, true);
        let maps = bound.model_forward(tape, v)?;
        let targets: Vec<_> = gtc.iter().map(|t| tape.leaf(t)).collect();
        multi_stage_loss(tape, &maps, &targets)
    };
    let coords: Vec<usize> = (0..img_shape.numel()).step_by(7).collect();
    let err = gradient_check_at(&f, &img, 1e-5, &coords).unwrap();
    println!("full T=2 model input-gradient check: max rel err {err:.3e}");

    // gradient w.r.t. a backbone weight and a stage weight
    for pname in ["backbone.conv0.weight", "stage2.conv0.weight", "ppm.scale1.weight"] {
        let model_c = model.clone();
        let img_c = img.clone();
        let gt_c = gt.clone();
        let name = pname.to_string();
        let f = move |tape: &mut Tape, v: countloc::tensor::Var| {
            let bound = model_c.bind_with_override(tape, false, &name, v)?;
            let iv = tape.leaf(&img_c);
            let maps = bound.model_forward(tape, iv)?;
            let targets: Vec<_> = gt_c.iter().map(|t| tape.leaf(t)).collect();
            multi_stage_loss(tape, &maps, &targets)
        };
        let w = model.param(pname).unwrap().clone();
        let coords: Vec<usize> = (0..w.shape().numel()).step_by(5).collect();
        let err = gradient_check_at(&f, &w, 1e-5, &coords).unwrap();
        println!("{pname}: max rel err {err:.3e}");
    }

    // per-layer gradient norms on the real benchmark
    let spec = SynthSpec::default();
    let samples = synthesize(&spec).unwrap();
    let bench_cfg = NetworkConfig {
        input_size: 64,
        stages: 4,
        backbone_widths: [8, 16, 16],
        ppm_scales: vec![1, 2, 3, 6],
        ppm_channels: 8,
        stage_widths: [8, 16],
        stride: 8,
    };
    let bench = Model::new(bench_cfg, 77).unwrap();
    let schedule = SigmaSchedule::make(4, 3.0, 1.0).unwrap();
    let batch: Vec<&countloc::dataset::Sample> = samples.iter().take(4).collect();
    println!("batch loss at init: {:.4}", batch_loss(&bench, &batch, &schedule).unwrap());

    let mut tape = Tape::new();
    let bound = bench.bind(&mut tape, true);
    let rasters: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let input = countloc::dataset::rasters_to_tensor(&rasters).unwrap();
    let iv = tape.leaf(&input);
    let maps = bound.model_forward(&mut tape, iv).unwrap();
    let mut targets = Vec::new();
    for &sigma in schedule.sigmas() {
        let mut gts = Vec::new();
        for s in &batch {
            let pts = s.point_set().unwrap().to_map_space(8).unwrap();
            gts.push(countloc::confmap::render_gt_map(&pts, sigma, 8, 8, 8).unwrap());
        }
        let refs: Vec<&countloc::confmap::ConfidenceMap> = gts.iter().collect();
        targets.push(tape.leaf(&countloc::confmap::maps_to_tensor(&refs).unwrap()));
    }
    for (t, (&m, &g)) in maps.iter().zip(&targets).enumerate() {
        let pd = tape.data(m);
        let gd = tape.data(g);
        let pmin = pd.iter().cloned().fold(f64::INFINITY, f64::min);
        let pmax = pd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gmean = gd.iter().sum::<f64>() / gd.len() as f64;
        println!(
            "stage {}: pred range [{pmin:.3}, {pmax:.3}], gt mean {gmean:.3}",
            t + 1
        );
    }
    let loss = multi_stage_loss(&mut tape, &maps, &targets).unwrap();
    tape.backward(loss).unwrap();
    for p in bench.params() {
        if p.name.ends_with(".weight") {
            let var = bound.var(&p.name).unwrap();
            let norm = tape
                .grad(var)
                .map(|g| (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt())
                .unwrap_or(0.0);
            println!("grad rms {:>26}: {norm:.3e}", p.name);
        }
    }
}
