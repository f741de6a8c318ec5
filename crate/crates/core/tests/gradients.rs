use ulmfit::gradcheck::{finite_difference_report, GradCheck};
use ulmfit::model::{classifier_forward, encoder_forward, lm_decode, Model, ModelConfig, Phase};
use ulmfit::{Result, Rng, Tape, Tensor, Var};

fn toy_config() -> ModelConfig {
    ModelConfig {
        embedding_size: 8,
        hidden_size: 12,
        dropout_multiplier: 0.0,
        ..ModelConfig::new(20)
    }
}

/// Random evaluation point: matrices uniform in ±1/√fan_in, vectors in ±0.5
/// so every bias path carries signal.
fn randomize(model: &mut Model, rng: &mut Rng) {
    for p in model.params_mut() {
        let shape = p.tensor.shape().to_vec();
        let bound = if shape.len() == 2 { 1.0 / (shape[1] as f64).sqrt() } else { 0.5 };
        *p.tensor = Tensor::uniform(&shape, bound, rng);
    }
}

fn set_params(model: &mut Model, values: &[Tensor]) {
    for (p, v) in model.params_mut().into_iter().zip(values) {
        *p.tensor = v.clone();
    }
}

/// `loss` binds the model itself and returns the loss with the bound
/// parameter vars.
fn check(model: &Model, loss: impl Fn(&Model, &mut Tape) -> Result<(Var, Vec<Var>)>) -> GradCheck {
    let mut tape = Tape::new();
    let (l, vars) = loss(model, &mut tape).unwrap();
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let mut params: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let mut scratch = model.clone();
    finite_difference_report(
        |p| {
            set_params(&mut scratch, p);
            let mut t = Tape::new();
            let (l, _) = loss(&scratch, &mut t)?;
            t.value(l).item()
        },
        &mut params,
        &analytic,
        1e-6,
    )
    .unwrap()
}

#[test]
fn lm_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = Rng::new(seed);
        let mut model = Model::new_lm(toy_config(), &mut rng).unwrap();
        randomize(&mut model, &mut rng);
        let ids: Vec<usize> = (0..10).map(|_| rng.below(20)).collect();
        let targets: Vec<usize> = (0..10).map(|_| rng.below(20)).collect();
        let r = check(&model, |m, tape| {
            let bound = m.bind(tape, &[true; 5])?;
            let enc = encoder_forward(tape, m, &bound, &ids, 2, None, None, &mut Phase::Eval)?;
            let logits = lm_decode(tape, m, &bound, &enc, &mut Phase::Eval)?;
            Ok((tape.cross_entropy(logits, &targets)?, bound.vars))
        });
        println!("lm seed {seed}: {r:?}");
        assert!(r.max_relative_error <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn classifier_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = Rng::new(100 + seed);
        let mut config = toy_config();
        config.n_classes = Some(3);
        let mut model = Model::new_classifier(config, &mut rng).unwrap();
        randomize(&mut model, &mut rng);
        let ids: Vec<usize> = (0..12).map(|_| rng.below(20)).collect();
        let valid: Vec<bool> = (0..12).map(|i| !(i == 0 || i == 1 || i == 4)).collect();
        let labels = vec![0, 2, 1];
        let r = check(&model, |m, tape| {
            let bound = m.bind(tape, &[true; 5])?;
            let enc = encoder_forward(tape, m, &bound, &ids, 3, Some(&valid), None, &mut Phase::Eval)?;
            // Training mode exercises batch statistics; dropout is off.
            let mut drop_rng = Rng::new(0);
            let out = classifier_forward(tape, m, &bound, &enc, Some(&valid), &mut Phase::Train(&mut drop_rng))?;
            Ok((tape.cross_entropy(out.logits, &labels)?, bound.vars))
        });
        println!("classifier seed {seed}: {r:?}");
        assert!(r.max_relative_error <= 1e-4, "seed {seed}: {r:?}");
    }
}
