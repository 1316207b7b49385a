mod common;

use common::{sized_batch, sized_spec, toy_batch, toy_model, toy_spec, unimodal_batch, unimodal_spec};
use mmvb::autodiff::Tape;
use mmvb::gradcheck::grad_check;
use mmvb::model::{MultimodalVae, Strategy};
use mmvb::objectives::{elbo, objective, term_noise, ObjectiveConfig};
use mmvb::optim::AdamState;
use mmvb::tensor::Tensor;

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (rows, wa, wb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let data = (0..rows)
        .flat_map(|r| a.data()[r * wa..(r + 1) * wa].iter().chain(&b.data()[r * wb..(r + 1) * wb]).copied())
        .collect();
    Tensor::new(&[rows, wa + wb], data).unwrap()
}

#[test]
fn single_modality_objectives_are_the_plain_elbo() {
    let latent = 3;
    for strategy in Strategy::ALL {
        for seed in 0..5 {
            let model = toy_model(unimodal_spec(strategy, latent), seed);
            let batch = unimodal_batch(6, seed + 100);
            let mut cfg = ObjectiveConfig::new(1);
            cfg.poe_prior = false;
            let mut tape = Tape::new();
            let got = objective(&mut tape, &model, &batch, &cfg, seed).unwrap().report.total;

            let enc = model.encode(&mut tape, &batch).unwrap();
            let (q, noise) = match strategy {
                Strategy::Dmvae => {
                    let private = enc.private[0].unwrap();
                    let q = private.concat(&mut tape, &enc.shared[0].unwrap()).unwrap();
                    let noise =
                        concat_cols(&term_noise(seed, "private0", 6, 2), &term_noise(seed, "shared", 6, latent));
                    (q, noise)
                }
                _ => (enc.shared[0].unwrap(), term_noise(seed, "{0}", 6, latent)),
            };
            let want = elbo(&mut tape, &model, &batch, &cfg, &q, &noise, &[0]).unwrap().report.total;
            assert!((got - want).abs() <= 1e-9, "{strategy} seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    for strategy in Strategy::ALL {
        for seed in 0..20 {
            let mut model = toy_model(toy_spec(strategy, 4), seed);
            let spec = model.spec().clone();
            let batch = toy_batch(4, seed);
            let cfg = ObjectiveConfig::new(2);
            let report = grad_check(
                &mut model.params,
                |tape, store| {
                    let m = MultimodalVae::from_params(spec.clone(), store.clone()).unwrap();
                    objective(tape, &m, &batch, &cfg, seed).unwrap().loss
                },
                1e-6,
                1e-4,
                Some(8),
            );
            assert!(report.passed(), "{strategy} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn losses_halve_on_a_ten_sample_fixture() {
    for strategy in Strategy::ALL {
        let mut model = toy_model(sized_spec(strategy, 4, 32, 64, 12), 1);
        let batch = sized_batch(10, 2, 64, 12);
        let cfg = ObjectiveConfig::new(2);
        let mut adam = AdamState::new(&model.params, 1e-2);
        let mut losses = Vec::new();
        for step in 0..200 {
            let mut tape = Tape::new();
            let obj = objective(&mut tape, &model, &batch, &cfg, step).unwrap();
            assert!(obj.report.total.is_finite());
            losses.push(obj.report.total);
            tape.backward(obj.loss).unwrap();
            model.params.zero_grads();
            tape.write_param_grads(&mut model.params);
            adam.step(&mut model.params).unwrap();
        }
        let (first, last) = (losses[0], losses[190..].iter().sum::<f64>() / 10.0);
        assert!(last < 0.5 * first, "{strategy}: {first} -> {last}");
    }
}
