//! Instance label maps and foreground exclusion.

use crate::error::{Error, Result};

use super::morphology::dilate;
use super::Mask;

/// Per-pixel instance labels: 0 is background, `1..=N` are instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    width: usize,
    height: usize,
    labels: Vec<u16>,
    count: usize,
}

impl InstanceMap {
    /// Validates that the non-zero labels are exactly `1..=N`.
    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "instance_map",
                format!("{} labels for a {width}x{height} map", labels.len()),
            ));
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut present = vec![false; max + 1];
        for &l in &labels {
            present[l as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&k| !present[k]) {
            return Err(Error::InvalidArgument(format!(
                "instance labels are not contiguous: id {missing} is missing below the maximum {max}"
            )));
        }
        Ok(InstanceMap {
            width,
            height,
            labels,
            count: max,
        })
    }

    /// Relabels arbitrary ids to `1..=N` in increasing id order.
    pub fn relabel(width: usize, height: usize, raw: &[u16]) -> Result<Self> {
        let mut ids: Vec<u16> = raw.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let labels = raw
            .iter()
            .map(|&v| {
                if v == 0 {
                    0
                } else {
                    ids.binary_search(&v).expect("collected above") as u16 + 1
                }
            })
            .collect();
        Self::new(width, height, labels)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        InstanceMap {
            width,
            height,
            labels: vec![0; width * height],
            count: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_instances(&self) -> usize {
        self.count
    }

    /// Binary mask of instance `id` (1-based).
    pub fn instance(&self, id: usize) -> Mask {
        let data = self.labels.iter().map(|&l| (l as usize == id) as u8).collect();
        Mask::from_vec(self.width, self.height, data).expect("same size")
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.count + 1];
        for &l in &self.labels {
            areas[l as usize] += 1;
        }
        areas.remove(0);
        areas
    }
}

/// `|m ∩ s| / |s|`.
pub fn overlap_ratio(mask: &Mask, instance: &Mask) -> Result<f64> {
    if (mask.width(), mask.height()) != (instance.width(), instance.height()) {
        return Err(Error::shape(
            "overlap_ratio",
            format!(
                "mask {}x{} vs instance {}x{}",
                mask.width(),
                mask.height(),
                instance.width(),
                instance.height()
            ),
        ));
    }
    let area = instance.area();
    if area == 0 {
        return Err(Error::InvalidArgument("overlap_ratio of an empty instance".into()));
    }
    Ok(mask.intersection_area(instance) as f64 / area as f64)
}

/// Removes every instance covered by more than `threshold` from the hole.
///
/// Overlaps are measured against the input mask, so the result does not
/// depend on instance order. Each excluded instance is dilated by
/// `boundary_dilation` before subtraction. Returns the new mask and the ids
/// of the excluded instances.
pub fn exclude_instances(
    mask: &Mask,
    instances: &InstanceMap,
    threshold: f64,
    boundary_dilation: usize,
) -> Result<(Mask, Vec<usize>)> {
    if (mask.width(), mask.height()) != (instances.width(), instances.height()) {
        return Err(Error::shape("exclude_instances", "mask and instance map sizes differ"));
    }
    let mut out = mask.clone();
    let mut excluded = Vec::new();
    for id in 1..=instances.num_instances() {
        let inst = instances.instance(id);
        if overlap_ratio(mask, &inst)? > threshold {
            out.subtract(&dilate(&inst, boundary_dilation));
            excluded.push(id);
        }
    }
    Ok((out, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn non_contiguous_labels_rejected() {
        assert!(InstanceMap::new(2, 1, vec![0, 2]).is_err());
        let m = InstanceMap::relabel(3, 1, &[0, 7, 3]).unwrap();
        assert_eq!(m.labels(), &[0, 2, 1]);
    }

    #[test]
    fn overlap_counts() {
        let inst = block(8, 8, 2, 2, 3, 3);
        let mut m = Mask::new(8, 8);
        m.set(3, 3, true);
        assert!((overlap_ratio(&m, &inst).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(overlap_ratio(&block(8, 8, 0, 0, 8, 8), &inst).unwrap(), 1.0);
        assert_eq!(overlap_ratio(&Mask::new(8, 8), &inst).unwrap(), 0.0);
        assert!(overlap_ratio(&m, &Mask::new(8, 8)).is_err());
    }

    #[test]
    fn excluded_when_mostly_covered() {
        let mut labels = vec![0u16; 100];
        for y in 3..6 {
            for x in 3..6 {
                labels[y * 10 + x] = 1;
            }
        }
        let inst = InstanceMap::new(10, 10, labels).unwrap();
        let hole = block(10, 10, 0, 0, 10, 6);
        let (out, ids) = exclude_instances(&hole, &inst, 0.5, 1).unwrap();
        assert_eq!(ids, vec![1]);
        assert_eq!(out.intersection_area(&dilate(&inst.instance(1), 1)), 0);

        let small = block(10, 10, 3, 3, 3, 1);
        let (out, ids) = exclude_instances(&small, &inst, 0.5, 1).unwrap();
        assert!(ids.is_empty());
        assert_eq!(out, small);
    }
}
