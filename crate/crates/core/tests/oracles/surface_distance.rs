// All-pairs surface distances: (assd, mssd) in mm between two voxel sets.

#[allow(dead_code)]
pub fn brute_force_assd_mssd(a: &[[usize; 3]], b: &[[usize; 3]], spacing: [f64; 3]) -> (f64, f64) {
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |p: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all = Vec::with_capacity(a.len() + b.len());
    all.extend(a.iter().map(|p| nearest(p, b)));
    all.extend(b.iter().map(|p| nearest(p, a)));
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let max = all.iter().copied().fold(0.0, f64::max);
    (mean, max)
}
