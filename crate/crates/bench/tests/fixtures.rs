use ntkdfl_bench::{batch, clients, desk_model};

#[test]
fn fixtures_are_deterministic_and_in_range() {
    let a = batch(20, 196, 10, 3);
    assert_eq!(a, batch(20, 196, 10, 3));
    assert!(a.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.labels[0], 3);
}

#[test]
fn desk_clients_share_shapes() {
    let (mlp, w) = desk_model();
    assert_eq!(w.len(), mlp.param_count());
    let states = clients(&mlp, 3, 5);
    assert_eq!(states.len(), 3);
    assert!(states.iter().all(|s| s.weights.len() == w.len() && s.data.len() == 5));
    assert_ne!(states[0].weights, states[1].weights);
}
