use crate::numerics::ParameterStore;

/// `value -= lr * grad` for every entry, then zeroes the gradients.
pub fn sgd_step(store: &mut ParameterStore, lr: f64) {
    assert!(lr > 0.0, "learning rate must be positive");
    for (_, p) in store.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    store.zero_grads();
}

/// Like [`sgd_step`], restricted to entries whose name starts with `prefix`.
/// Gradients of all entries are zeroed afterwards.
pub fn sgd_step_prefix(store: &mut ParameterStore, lr: f64, prefix: &str) {
    assert!(lr > 0.0, "learning rate must be positive");
    for (name, p) in store.iter_mut() {
        if !name.starts_with(prefix) {
            continue;
        }
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
    }
    store.zero_grads();
}
