//! `cmgan sample-masks`: mask PNGs plus a stats JSON with an exclusion audit.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cmgan::imageio::{load_instance_map, save_mask};
use cmgan::maskgen::{sample_object_aware_mask, InstanceMap, MaskConfig, MaskSample};
use cmgan::Prng;
use serde::Serialize;

use crate::config::RunConfig;

pub const HISTOGRAM_BINS: usize = 20;

pub struct SampleArgs {
    pub instances: PathBuf,
    pub config: PathBuf,
    pub count: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KindCounts {
    pub free_form: usize,
    pub object: usize,
    pub rect: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct KindStats {
    pub free_form: f64,
    pub object: f64,
    pub rect: f64,
}

impl KindStats {
    fn from_counts(counts: [usize; 3]) -> Self {
        let total = counts.iter().sum::<usize>();
        let f = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
        KindStats {
            free_form: f(counts[0]),
            object: f(counts[1]),
            rect: f(counts[2]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AreaHistogram {
    /// `bins + 1` edges over the hole fraction `[0, 1]`; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskStats {
    pub count: usize,
    pub instance_maps: usize,
    pub seed: u64,
    /// Kind of every returned mask.
    pub type_counts: KindCounts,
    pub type_frequencies: KindStats,
    /// Kind of every draw, rejected ones included.
    pub draw_frequencies: KindStats,
    pub area_histogram: AreaHistogram,
    pub mean_area: f64,
    pub min_area: f64,
    pub below_min_area: usize,
    /// Masks returned after every iteration was rejected.
    pub fallbacks: usize,
    pub max_iterations_used: usize,
    pub overlap_threshold: f64,
    pub boundary_dilation: usize,
    /// Returned masks with any pixel inside a removed instance's dilated support.
    pub exclusion_violations: usize,
}

pub fn run(args: &SampleArgs) -> Result<MaskStats> {
    let config = RunConfig::load(&args.config)?;
    let maps = load_instance_dir(&args.instances)?;
    let library = config.silhouette_library()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let root = Prng::new(config.seed);
    let mut types = [0usize; 3];
    let mut draws = [0usize; 3];
    let mut areas = Vec::with_capacity(args.count);
    let (mut fallbacks, mut max_iter, mut violations, mut below) = (0, 0, 0, 0);
    for i in 0..args.count {
        let inst = &maps[i % maps.len()];
        let mut rng = root.substream_indexed("mask", i as u64);
        let s = sample_object_aware_mask(inst, &mut rng, &config.masks, &library)?;
        types[s.kind.index()] += 1;
        for k in &s.draws {
            draws[k.index()] += 1;
        }
        fallbacks += !s.accepted as usize;
        max_iter = max_iter.max(s.draws.len());
        violations += exclusion_violated(&s, inst, &config.masks) as usize;
        let area = s.mask.fraction();
        below += (area < config.masks.min_area) as usize;
        areas.push(area);
        save_mask(&args.out.join(format!("mask_{i:05}.png")), &s.mask)?;
    }

    let stats = MaskStats {
        count: args.count,
        instance_maps: maps.len(),
        seed: config.seed,
        type_counts: KindCounts {
            free_form: types[0],
            object: types[1],
            rect: types[2],
        },
        type_frequencies: KindStats::from_counts(types),
        draw_frequencies: KindStats::from_counts(draws),
        area_histogram: histogram(&areas, HISTOGRAM_BINS),
        mean_area: if areas.is_empty() {
            0.0
        } else {
            areas.iter().sum::<f64>() / areas.len() as f64
        },
        min_area: config.masks.min_area,
        below_min_area: below,
        fallbacks,
        max_iterations_used: max_iter,
        overlap_threshold: config.masks.overlap_threshold,
        boundary_dilation: config.masks.boundary_dilation,
        exclusion_violations: violations,
    };
    fs::write(args.out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(stats)
}

/// Every PNG label map in `dir`, sorted by file name.
fn load_instance_dir(dir: &Path) -> Result<Vec<InstanceMap>> {
    let entries = fs::read_dir(dir).map_err(|e| cmgan::Error::Config(format!("instance maps {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(cmgan::Error::Config(format!("no instance map PNGs in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(load_instance_map(p)?)).collect()
}

fn histogram(values: &[f64], bins: usize) -> AreaHistogram {
    let mut counts = vec![0; bins];
    for &v in values {
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    AreaHistogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        counts,
    }
}

/// Rechecks exclusion from raw labels: every instance covered by more than the
/// threshold in the initial hole must have no pixel of the returned mask
/// within the dilation radius (Euclidean disk).
pub fn exclusion_violated(s: &MaskSample, inst: &InstanceMap, config: &MaskConfig) -> bool {
    let (w, h) = (inst.width(), inst.height());
    let labels = inst.labels();
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    let (mut area, mut hit) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for (i, &l) in labels.iter().enumerate() {
        area[l as usize] += 1;
        hit[l as usize] += (s.initial.data()[i] != 0) as usize;
    }
    let removed: Vec<bool> = (0..=n)
        .map(|l| l > 0 && area[l] > 0 && hit[l] as f64 / area[l] as f64 > config.overlap_threshold)
        .collect();
    let r = config.boundary_dilation as isize;
    let hole = |x: isize, y: isize| s.mask.get(x as usize, y as usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !removed[labels[y as usize * w + x as usize] as usize] {
                continue;
            }
            for qy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for qx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    if (qy - y).pow(2) + (qx - x).pow(2) <= r * r && hole(qx, qy) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmgan::maskgen::{Mask, MaskKind};

    #[test]
    fn histogram_edges_and_last_bin_closed() {
        let h = histogram(&[0.0, 0.04, 0.05, 0.999, 1.0], 20);
        assert_eq!(h.edges.len(), 21);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[19], 2);
    }

    #[test]
    fn audit_flags_a_covered_instance_left_in_the_hole() {
        let (w, h) = (8, 8);
        let mut labels = vec![0u16; w * h];
        for y in 2..4 {
            for x in 2..4 {
                labels[y * w + x] = 1;
            }
        }
        let inst = InstanceMap::new(w, h, labels).unwrap();
        let full = Mask::from_vec(w, h, vec![1; w * h]).unwrap();
        let config = MaskConfig {
            boundary_dilation: 1,
            ..MaskConfig::default()
        };
        let sample = |mask: Mask| MaskSample {
            mask,
            initial: full.clone(),
            kind: MaskKind::Rect,
            draws: vec![MaskKind::Rect],
            excluded: vec![1],
            accepted: true,
        };
        assert!(exclusion_violated(&sample(full.clone()), &inst, &config));
        let mut carved = full.clone();
        for y in 1..5 {
            for x in 1..5 {
                carved.set(x, y, false);
            }
        }
        assert!(!exclusion_violated(&sample(carved.clone()), &inst, &config));
        carved.set(1, 2, true);
        assert!(exclusion_violated(&sample(carved), &inst, &config));
    }
}
