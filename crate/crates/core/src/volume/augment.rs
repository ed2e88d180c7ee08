use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

/// Mirrors the columns of every `[.., h, w]` plane.
pub fn flip_horizontal<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for plane in data.chunks_mut(h * w) {
        for row in plane.chunks_mut(w) {
            row.reverse();
        }
    }
}

/// Mirrors the rows of every `[.., h, w]` plane.
pub fn flip_vertical<T: Copy>(data: &mut [T], h: usize, w: usize) {
    for plane in data.chunks_mut(h * w) {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

impl Flips {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            horizontal: rng.gen_bool(0.5),
            vertical: rng.gen_bool(0.5),
        }
    }

    pub fn apply<T: Copy>(self, data: &mut [T], h: usize, w: usize) {
        if self.horizontal {
            flip_horizontal(data, h, w);
        }
        if self.vertical {
            flip_vertical(data, h, w);
        }
    }
}

/// Random horizontal and vertical flips (each with probability 0.5)
/// applied jointly to a `[C, h, w]` image and its label plane.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, labels: &[u8], rng: &mut R) -> (Tensor, Vec<u8>, Flips) {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let flips = Flips::sample(rng);
    let mut img = image.clone();
    let mut lab = labels.to_vec();
    flips.apply(img.data_mut(), h, w);
    flips.apply(&mut lab, h, w);
    (img, lab, flips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize) -> Vec<u32> {
        (0..(2 * h * w) as u32).collect()
    }

    #[test]
    fn flips_are_involutions() {
        for (h, w) in [(3, 4), (4, 5), (1, 1)] {
            let orig = grid(h, w);
            let mut d = orig.clone();
            flip_horizontal(&mut d, h, w);
            flip_horizontal(&mut d, h, w);
            assert_eq!(d, orig);
            flip_vertical(&mut d, h, w);
            assert_ne!(h > 1, d == orig);
            flip_vertical(&mut d, h, w);
            assert_eq!(d, orig);
        }
    }

    #[test]
    fn flips_commute() {
        let (h, w) = (5, 3);
        let mut a = grid(h, w);
        let mut b = a.clone();
        flip_horizontal(&mut a, h, w);
        flip_vertical(&mut a, h, w);
        flip_vertical(&mut b, h, w);
        flip_horizontal(&mut b, h, w);
        assert_eq!(a, b);
    }

    #[test]
    fn image_and_labels_share_the_decision() {
        let (h, w) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..32 {
            let mut img = Tensor::zeros(&[4, h, w]);
            let mut labels = vec![0u8; h * w];
            // marker at (row 1, col 2)
            for c in 0..4 {
                img.data_mut()[(c * h + 1) * w + 2] = 1.0;
            }
            labels[w + 2] = 4;
            let (img2, lab2, flips) = augment(&img, &labels, &mut rng);
            let lpos = lab2.iter().position(|&l| l == 4).unwrap();
            for c in 0..4 {
                let plane = &img2.data()[c * h * w..(c + 1) * h * w];
                assert_eq!(plane.iter().position(|&v| v == 1.0).unwrap(), lpos);
            }
            let row = if flips.vertical { h - 2 } else { 1 };
            let col = if flips.horizontal { w - 3 } else { 2 };
            assert_eq!(lpos, row * w + col);
            seen.insert((flips.horizontal, flips.vertical));
        }
        assert_eq!(seen.len(), 4);
    }
}
