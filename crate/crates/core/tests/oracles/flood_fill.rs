// Recursive flood fill: components numbered in scan order of their first voxel.
// The includer must bring `LabelVolume` into scope.

#[allow(dead_code)]
pub fn flood_fill_labels(mask: &LabelVolume, full: bool) -> Vec<u32> {
    fn visit(mask: &LabelVolume, full: bool, labels: &mut [u32], p: [usize; 3], id: u32) {
        let i = mask.index(p[0], p[1], p[2]);
        if mask.data()[i] == 0 || labels[i] != 0 {
            return;
        }
        labels[i] = id;
        let d = mask.dims();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let steps = dx.abs() + dy.abs() + dz.abs();
                    if steps == 0 || (!full && steps > 1) {
                        continue;
                    }
                    let q = [p[0] as i64 + dx, p[1] as i64 + dy, p[2] as i64 + dz];
                    if (0..3).all(|a| q[a] >= 0 && q[a] < d[a] as i64) {
                        visit(mask, full, labels, [q[0] as usize, q[1] as usize, q[2] as usize], id);
                    }
                }
            }
        }
    }

    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    for i in 0..mask.len() {
        if mask.data()[i] != 0 && labels[i] == 0 {
            next += 1;
            visit(mask, full, &mut labels, mask.coords(i), next);
        }
    }
    labels
}
