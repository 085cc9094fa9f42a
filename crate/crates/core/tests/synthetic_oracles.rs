mod support;

use stet_core::harness::{prepare, RunConfig};
use stet_core::signal::synthetic::SyntheticSpec;
use support::{channel_rms, local_energy, nn_accuracy, oracle_accuracy};

fn data(spec: SyntheticSpec) -> stet_core::harness::PreparedData {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = spec;
    prepare(&cfg).unwrap()
}

#[test]
fn disjoint_classes_are_separable_by_channel_power() {
    let d = data(SyntheticSpec {
        n_classes: 2,
        twin_pairs: 0,
        samples_per_class: 100,
        ..Default::default()
    });
    let acc = oracle_accuracy(&d.train, &d.test, &[0, 1], channel_rms);
    assert!(acc > 0.95, "rms oracle {acc}");
}

#[test]
fn twins_need_timing_not_power() {
    let d = data(SyntheticSpec::default());
    let rms = oracle_accuracy(&d.train, &d.test, &[0, 1], channel_rms);
    let nn = nn_accuracy(&d.train, &d.test, &[0, 1], |w| local_energy(w, 4));
    assert!(rms <= 0.65, "rms oracle {rms}");
    assert!(nn > 0.80, "nearest-neighbour oracle {nn}");
}

#[test]
fn non_twin_classes_differ_in_power() {
    let d = data(SyntheticSpec::default());
    let acc = oracle_accuracy(&d.train, &d.test, &[2, 3, 4, 5, 6, 7], channel_rms);
    assert!(acc > 0.85, "rms oracle on non-twin classes {acc}");
}
