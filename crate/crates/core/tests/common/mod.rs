//! Helpers shared by the integration-test binaries.

#![allow(dead_code)]

use dynamoe::nn::Model;
use dynamoe::tensor::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates where a ±h step crossed a ReLU kink or changed routing.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Routing decisions plus ReLU activation pattern of one eval-mode pass.
fn loss_and_signature(model: &Model, x: &Array, labels: &[usize]) -> (f64, u64, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = model.forward(x, false, &mut rng).expect("forward");
    let routes = pass
        .selections
        .iter()
        .flat_map(|layer| layer.iter().map(|s| s.indices.clone()))
        .collect();
    let loss = pass.tape.cross_entropy(pass.logits, labels).expect("loss");
    (pass.tape.value(loss).data()[0], pass.tape.relu_signature(), routes)
}

/// Compares every analytic parameter gradient with a central difference.
/// The relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(model: &mut Model, x: &Array, labels: &[usize], h: f64, floor: f64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let analytic = model.loss_and_grads(x, labels, false, &mut rng).expect("grads").grads;
    let (_, sig0, routes0) = loss_and_signature(model, x, labels);
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();

    let mut report = GradcheckReport::default();
    for (p, name) in names.iter().enumerate() {
        let len = analytic[p].len();
        for j in 0..len {
            let orig = model.params_mut()[p].data()[j];
            model.params_mut()[p].data_mut()[j] = orig + h;
            let (lp, sp, rp) = loss_and_signature(model, x, labels);
            model.params_mut()[p].data_mut()[j] = orig - h;
            let (lm, sm, rm) = loss_and_signature(model, x, labels);
            model.params_mut()[p].data_mut()[j] = orig;
            if sp != sig0 || sm != sig0 || rp != routes0 || rm != routes0 {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[p].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{j}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}
