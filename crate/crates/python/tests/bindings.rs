use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn run(code: &str) {
    Python::attach(|py| {
        let module = wrap_pymodule!(sfda::sfda)(py);
        let globals = PyDict::new(py);
        globals.set_item("sfda", module).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn divergences_match_closed_forms() {
    run(r#"
import math
assert abs(sfda.tv_discrete([0.5, 0.5], [0.9, 0.1]) - 0.4) < 1e-15
assert sfda.tv_discrete([1.0, 0.0], [0.0, 1.0]) == 1.0
assert abs(sfda.kl_discrete([1.0, 0.0], [0.5, 0.5]) - math.log(2)) < 1e-15
assert sfda.kl_discrete([0.5, 0.5], [1.0, 0.0]) == math.inf
assert sfda.pinsker_check([0.3, 0.7], [0.6, 0.4])
try:
    sfda.tv_discrete([0.5, 0.5], [1.0])
except sfda.SfdaError:
    pass
else:
    raise AssertionError("size mismatch accepted")
"#);
}

#[test]
fn bound_terms_add_up() {
    run(r#"
import math
r = sfda.bound_rhs(loss_bound=1.0, diameter=1.0, radius=1.0, epsilon=0.0, theta=0.5, dim=2,
                   m=10000, n=10000, tv=0.0, source_risk=0.0)
ln2 = math.log(2)
want = 2 * math.sqrt((4 * ln2 + 2 * ln2) / 1e4) + math.sqrt(ln2 / 2e4)
assert abs(r["total"] - want) <= 1e-12, r
parts = r["source_risk"] + r["smoothness"] + r["divergence"] + r["target_complexity"] + r["source_complexity"] + r["confidence"]
assert abs(parts - r["total"]) <= 1e-12
assert r["vacuous"] is False
"#);
}

#[test]
fn config_keywords_round_trip() {
    run(r#"
c = sfda.AdaptationConfig(lambda_=0.0, adapt_epochs=3, hidden_dims=[8])
assert c.lambda_ == 0.0 and c.adapt_epochs == 3 and c.hidden_dims == [8]
assert c.beta == 1.0 and c.sigma is None
c.seed = 7
assert c.seed == 7
try:
    sfda.AdaptationConfig(lamda=1.0)
except sfda.SfdaError:
    pass
else:
    raise AssertionError("typo accepted")
"#);
}

#[test]
fn train_adapt_predict_end_to_end() {
    run(r#"
source, target = sfda.Dataset.two_moons_shift(n=200, rotate=30.0, seed=1)
assert len(source) == 200 and source.num_classes == 2
cfg = sfda.AdaptationConfig(source_epochs=5, adapt_epochs=2, hidden_dims=[16], bottleneck_dim=4, probe_points=20, seed=1)
model, history = sfda.train_source(source, cfg)
assert len(history) == 5
assert model.evaluate(source) == history[-1][2]
adapted, metrics = sfda.adapt_target(model, target, cfg)
assert len(metrics) == 2 and metrics.records[-1].epoch == 2
assert metrics.records[-1].target_acc == adapted.evaluate(target)
assert adapted.classifier_equal(model) and adapted.classifier_frozen
again, metrics2 = sfda.adapt_target(model, target, cfg)
assert metrics2.to_csv() == metrics.to_csv()
assert again.to_json() == adapted.to_json()
x = target.features[:5]
probs = adapted.predict_probs(x)
assert all(abs(sum(p) - 1) < 1e-12 for p in probs)
assert adapted.predict(x) == [max(range(2), key=lambda c: p[c]) for p in probs]
assert len(adapted.pseudo_labels(x)) == 5
assert adapted.jn_exact(x) >= 0.0 and adapted.smoothness(x) >= 0.0
assert sfda.Model.from_json(adapted.to_json()).predict(x) == adapted.predict(x)
"#);
}

#[test]
fn unlabeled_target_cannot_be_scored() {
    run(r#"
_, target = sfda.Dataset.two_moons_shift(n=50, seed=0)
blind = target.unlabeled()
assert blind.labels is None
ds = sfda.Dataset([[0.0, 1.0], [1.0, 0.0]], [0, 1])
assert ds.features == [[0.0, 1.0], [1.0, 0.0]]
try:
    sfda.Dataset([[0.0, 1.0]], [5])
except sfda.SfdaError:
    pass
else:
    raise AssertionError("label out of range accepted")
"#);
}
