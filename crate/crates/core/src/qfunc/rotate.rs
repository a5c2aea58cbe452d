//! Grid rotations expressed as index maps.
//!
//! Quarter turns are exact permutations (with width and height swapped for odd
//! turns). Other angles resample with nearest-neighbor lookup about the grid
//! center and leave out-of-range pixels empty.

/// Maps between an `h × w` grid and the network frame for one orientation.
///
/// In the network frame the gripper x-axis points along +x, so the original
/// grid is rotated by `-theta` going in and by `+theta` coming out.
#[derive(Clone, Debug)]
pub struct Rotation {
    pub height: usize,
    pub width: usize,
    pub net_height: usize,
    pub net_width: usize,
    /// For each network-frame pixel, the source grid pixel it reads.
    pub to_net: Vec<Option<usize>>,
    /// For each grid pixel, the network-frame pixel it reads on the way back.
    pub from_net: Vec<Option<usize>>,
}

fn rotate_vec(theta: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x - s * y, s * x + c * y)
}

impl Rotation {
    pub fn new(height: usize, width: usize, theta_index: usize, rotations: usize) -> Self {
        if (4 * theta_index) % rotations == 0 {
            Self::quarter(height, width, (4 * theta_index / rotations) % 4)
        } else {
            let theta = std::f64::consts::TAU * theta_index as f64 / rotations as f64;
            Self::nearest(height, width, theta)
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::quarter(height, width, 0)
    }

    fn quarter(height: usize, width: usize, turns: usize) -> Self {
        let (nh, nw) = if turns % 2 == 1 { (width, height) } else { (height, width) };
        // Network pixel (qx, qy) reads grid pixel c + rot(theta) (q - c').
        let source = |qx: usize, qy: usize| -> (usize, usize) {
            match turns {
                0 => (qx, qy),
                1 => (width - 1 - qy, qx),
                2 => (width - 1 - qx, height - 1 - qy),
                _ => (qy, height - 1 - qx),
            }
        };
        let mut to_net = vec![None; nh * nw];
        let mut from_net = vec![None; height * width];
        for qy in 0..nh {
            for qx in 0..nw {
                let (px, py) = source(qx, qy);
                to_net[qy * nw + qx] = Some(py * width + px);
                from_net[py * width + px] = Some(qy * nw + qx);
            }
        }
        Rotation {
            height,
            width,
            net_height: nh,
            net_width: nw,
            to_net,
            from_net,
        }
    }

    fn nearest(height: usize, width: usize, theta: f64) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let lookup = |x: usize, y: usize, angle: f64| -> Option<usize> {
            let (dx, dy) = rotate_vec(angle, x as f64 - cx, y as f64 - cy);
            let sx = (cx + dx).round();
            let sy = (cy + dy).round();
            if sx < 0.0 || sy < 0.0 || sx >= width as f64 || sy >= height as f64 {
                None
            } else {
                Some(sy as usize * width + sx as usize)
            }
        };
        let mut to_net = Vec::with_capacity(height * width);
        let mut from_net = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                to_net.push(lookup(x, y, theta));
                from_net.push(lookup(x, y, -theta));
            }
        }
        Rotation {
            height,
            width,
            net_height: height,
            net_width: width,
            to_net,
            from_net,
        }
    }

    /// Rotates a `[channel][y][x]` stack into the network frame.
    pub fn into_net(&self, channels: usize, data: &[f64]) -> Vec<f64> {
        let plane = self.height * self.width;
        let net_plane = self.net_height * self.net_width;
        let mut out = vec![0.0; channels * net_plane];
        for c in 0..channels {
            let src = &data[c * plane..(c + 1) * plane];
            let dst = &mut out[c * net_plane..(c + 1) * net_plane];
            for (d, s) in dst.iter_mut().zip(&self.to_net) {
                if let Some(i) = s {
                    *d = src[*i];
                }
            }
        }
        out
    }

    /// Rotates a single network-frame plane back to the grid frame.
    pub fn out_of_net(&self, net: &[f64]) -> Vec<f64> {
        self.from_net
            .iter()
            .map(|s| s.map_or(0.0, |i| net[i]))
            .collect()
    }
}
