use super::array::DenseArray;

/// Central-difference gradient of a scalar function:
/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff(f: impl Fn(&DenseArray) -> f64, x: &DenseArray, h: f64) -> DenseArray {
    assert!(h > 0.0, "finite_diff step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    DenseArray::from_parts(x.shape().to_vec(), grad)
}
