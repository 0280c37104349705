//! Binary dilation by a disk.

use super::Mask;

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Dilation by a disk of `radius`; pixels outside the image are background.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let offsets = disk_offsets(radius);
    let mut out = Mask::new(mask.width(), mask.height());
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            // skip interior pixels whose 4-neighbours are all set
            let interior = [(0, 1), (0, -1), (1, 0), (-1, 0)].iter().all(|&(dy, dx)| {
                let (ny, nx) = (y + dy, x + dx);
                ny >= 0 && ny < h && nx >= 0 && nx < w && mask.get(nx as usize, ny as usize)
            });
            if interior {
                out.set(x as usize, y as usize, true);
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && ny < h && nx >= 0 && nx < w {
                    out.set(nx as usize, ny as usize, true);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_radius_one_is_a_plus() {
        assert_eq!(disk_offsets(1).len(), 5);
        assert_eq!(disk_offsets(2).len(), 13);
    }

    #[test]
    fn single_pixel_grows_into_disk() {
        let mut m = Mask::new(9, 9);
        m.set(4, 4, true);
        assert_eq!(dilate(&m, 2).area(), 13);
        assert_eq!(dilate(&m, 0), m);
    }

    #[test]
    fn clipped_at_border() {
        let mut m = Mask::new(5, 5);
        m.set(0, 0, true);
        assert_eq!(dilate(&m, 1).area(), 3);
    }
}
