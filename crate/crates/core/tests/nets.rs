use adverdecom::nets::{self, Backbone, NetConfig, NetworkParams};
use ndarray::array;

fn set(p: &mut NetworkParams<f64>, name: &str, values: &[f64]) {
    let t = p.tensor_mut(name).unwrap_or_else(|| panic!("no tensor {name}"));
    assert_eq!(t.data.len(), values.len(), "{name}");
    t.data.copy_from_slice(values);
}

/// Zero weights except where set, hand-picked biases, one 1x1x2 sample; each
/// layer worked out by hand in the comments.
#[test]
fn hand_propagated_toy_network() {
    let cfg = NetConfig {
        feature_dim: 2,
        conv_channels: vec![2, 2],
        head_hidden: 2,
        disc_hidden: [2, 2],
        ..NetConfig::new(Backbone::Compact2d, 2, 2, 1, 2, 0)
    };
    let mut p = nets::init_params::<f64>(&cfg).unwrap();
    for t in p.tensors.iter_mut() {
        t.data.iter_mut().for_each(|v| *v = 0.0);
    }
    // conv1 -> relu([0.5, -1]) = [0.5, 0]; conv2 -> relu([1, -2]) = [1, 0] = hidden
    set(&mut p, "backbone.conv1.bias", &[0.5, -1.0]);
    set(&mut p, "backbone.conv2.bias", &[1.0, -2.0]);
    // head1: relu(hidden . I + [0, 0.5]) = [1, 0.5]; fc2 -> [2, 3] = f1
    set(&mut p, "head1.fc1.weight", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut p, "head1.fc1.bias", &[0.0, 0.5]);
    set(&mut p, "head1.fc2.bias", &[2.0, 3.0]);
    // head2: fc2 -> [0.5, -1] = f2; fused = [1, -3]
    set(&mut p, "head2.fc2.bias", &[0.5, -1.0]);
    // logits = fused . I = [1, -3]
    set(&mut p, "classifier.weight", &[1.0, 0.0, 0.0, 1.0]);
    // disc logits = [ln 3, 0] -> probs [3/4, 1/4]
    set(&mut p, "disc.fc1.bias", &[1.0, 2.0]);
    set(&mut p, "disc.fc3.bias", &[3f64.ln(), 0.0]);

    let out = nets::forward(&p, &array![[0.3, 0.7]]).unwrap();
    assert_eq!(out.hidden.row(0).to_vec(), vec![1.0, 0.0]);
    assert_eq!(out.f1_out.row(0).to_vec(), vec![2.0, 3.0]);
    assert_eq!(out.f2_out.row(0).to_vec(), vec![0.5, -1.0]);
    assert_eq!(out.fused.row(0).to_vec(), vec![1.0, -3.0]);
    let p1 = 1.0 / (1.0 + (-4f64).exp());
    assert!((out.class_probs[[0, 0]] - p1).abs() < 1e-15);
    assert!((out.class_probs[[0, 1]] - (1.0 - p1)).abs() < 1e-15);
    assert!((out.env_probs[[0, 0]] - 0.75).abs() < 1e-15);
    assert!((out.env_probs[[0, 1]] - 0.25).abs() < 1e-15);
    assert_eq!(out.predicted_classes(), vec![1]);
    assert_eq!(out.predicted_envs(), vec![1]);
}

#[test]
fn parameter_shapes_are_a_function_of_the_config() {
    for bb in [Backbone::Compact2d, Backbone::Cnn3d, Backbone::HybridSn] {
        let cfg = NetConfig { feature_dim: 16, head_hidden: 16, ..NetConfig::new(bb, 4, 3, 5, 12, 1) };
        let a = nets::init_params::<f32>(&cfg).unwrap();
        let b = nets::init_params::<f32>(&NetConfig { seed: 99, ..cfg }).unwrap();
        let shapes = |p: &NetworkParams<f32>| p.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect::<Vec<_>>();
        assert_eq!(shapes(&a), shapes(&b), "{bb}");
        assert_ne!(a.flatten(), b.flatten());
    }
}
