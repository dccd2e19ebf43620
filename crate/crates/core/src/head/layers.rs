//! Dense 3D building blocks with their adjoints.

use super::VoxelFeatureVolume as Volume;

/// Kernel taps per 3x3x3 convolution.
pub const TAPS: usize = 27;

/// 3x3x3 convolution, stride 1, zero padding 1. Weights are laid out
/// `[out][in][dx][dy][dz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn offsets() -> impl Iterator<Item = (usize, [isize; 3])> {
    (0..TAPS).map(|t| {
        let t3 = t as isize;
        (t, [t3 / 9 - 1, (t3 / 3) % 3 - 1, t3 % 3 - 1])
    })
}

fn shifted(pos: usize, delta: isize, limit: usize) -> Option<usize> {
    let p = pos as isize + delta;
    (0..limit as isize).contains(&p).then_some(p as usize)
}

impl Conv3d {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv3d {
            cin,
            cout,
            weight: vec![0.0; cout * cin * TAPS],
            bias: vec![0.0; cout],
        }
    }

    pub fn w_index(&self, o: usize, i: usize, tap: usize) -> usize {
        (o * self.cin + i) * TAPS + tap
    }

    /// Pre-activation output.
    pub fn forward(&self, x: &Volume) -> Volume {
        debug_assert_eq!(x.ch, self.cin);
        let mut y = Volume::zeros(x.h, x.w, x.z, self.cout);
        for a in 0..x.h {
            for b in 0..x.w {
                for c in 0..x.z {
                    let out = y.cell_index(a, b, c);
                    y.data[out..out + self.cout].copy_from_slice(&self.bias);
                    for (tap, [da, db, dc]) in offsets() {
                        let (Some(na), Some(nb), Some(nc)) = (
                            shifted(a, da, x.h),
                            shifted(b, db, x.w),
                            shifted(c, dc, x.z),
                        ) else {
                            continue;
                        };
                        let src = x.cell_index(na, nb, nc);
                        for i in 0..self.cin {
                            let xv = x.data[src + i];
                            for o in 0..self.cout {
                                y.data[out + o] += self.weight[self.w_index(o, i, tap)] * xv;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient, given the forward input `x` and pre-activation gradient `dy`.
    pub fn backward(&self, x: &Volume, dy: &Volume, grad: &mut Conv3d) -> Volume {
        let mut dx = Volume::zeros(x.h, x.w, x.z, self.cin);
        for a in 0..x.h {
            for b in 0..x.w {
                for c in 0..x.z {
                    let out = dy.cell_index(a, b, c);
                    let g = &dy.data[out..out + self.cout];
                    for (gb, gv) in grad.bias.iter_mut().zip(g) {
                        *gb += gv;
                    }
                    for (tap, [da, db, dc]) in offsets() {
                        let (Some(na), Some(nb), Some(nc)) = (
                            shifted(a, da, x.h),
                            shifted(b, db, x.w),
                            shifted(c, dc, x.z),
                        ) else {
                            continue;
                        };
                        let src = x.cell_index(na, nb, nc);
                        for i in 0..self.cin {
                            let xv = x.data[src + i];
                            let mut acc = 0.0;
                            for (o, gv) in g.iter().enumerate() {
                                let w = self.w_index(o, i, tap);
                                grad.weight[w] += gv * xv;
                                acc += gv * self.weight[w];
                            }
                            dx.data[src + i] += acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2x average pooling over disjoint 2x2x2 blocks.
pub fn avg_pool2(x: &Volume) -> Volume {
    let mut y = Volume::zeros(x.h / 2, x.w / 2, x.z / 2, x.ch);
    for a in 0..x.h {
        for b in 0..x.w {
            for c in 0..x.z {
                let src = x.cell_index(a, b, c);
                let dst = y.cell_index(a / 2, b / 2, c / 2);
                for k in 0..x.ch {
                    y.data[dst + k] += x.data[src + k] / 8.0;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Volume) -> Volume {
    let mut dx = Volume::zeros(dy.h * 2, dy.w * 2, dy.z * 2, dy.ch);
    for a in 0..dx.h {
        for b in 0..dx.w {
            for c in 0..dx.z {
                let src = dy.cell_index(a / 2, b / 2, c / 2);
                let dst = dx.cell_index(a, b, c);
                for k in 0..dy.ch {
                    dx.data[dst + k] = dy.data[src + k] / 8.0;
                }
            }
        }
    }
    dx
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2(x: &Volume) -> Volume {
    let mut y = Volume::zeros(x.h * 2, x.w * 2, x.z * 2, x.ch);
    for a in 0..y.h {
        for b in 0..y.w {
            for c in 0..y.z {
                let src = x.cell_index(a / 2, b / 2, c / 2);
                let dst = y.cell_index(a, b, c);
                y.data[dst..dst + x.ch].copy_from_slice(&x.data[src..src + x.ch]);
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Volume) -> Volume {
    let mut dx = Volume::zeros(dy.h / 2, dy.w / 2, dy.z / 2, dy.ch);
    for a in 0..dy.h {
        for b in 0..dy.w {
            for c in 0..dy.z {
                let src = dy.cell_index(a, b, c);
                let dst = dx.cell_index(a / 2, b / 2, c / 2);
                for k in 0..dy.ch {
                    dx.data[dst + k] += dy.data[src + k];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a | b]`.
pub fn concat(a: &Volume, b: &Volume) -> Volume {
    debug_assert_eq!((a.h, a.w, a.z), (b.h, b.w, b.z));
    let ch = a.ch + b.ch;
    let mut data = Vec::with_capacity(a.cells() * ch);
    for (ca, cb) in a.data.chunks_exact(a.ch).zip(b.data.chunks_exact(b.ch)) {
        data.extend_from_slice(ca);
        data.extend_from_slice(cb);
    }
    Volume {
        h: a.h,
        w: a.w,
        z: a.z,
        ch,
        data,
    }
}

/// Inverse of [`concat`]: the first `first` channels, then the rest.
pub fn split(v: &Volume, first: usize) -> (Volume, Volume) {
    let mut a = Volume::zeros(v.h, v.w, v.z, first);
    let mut b = Volume::zeros(v.h, v.w, v.z, v.ch - first);
    for (i, cell) in v.data.chunks_exact(v.ch).enumerate() {
        a.data[i * first..(i + 1) * first].copy_from_slice(&cell[..first]);
        b.data[i * b.ch..(i + 1) * b.ch].copy_from_slice(&cell[first..]);
    }
    (a, b)
}

pub fn tanh_in_place(v: &mut Volume) {
    v.data.iter_mut().for_each(|x| *x = x.tanh());
}

/// `dy * (1 - y^2)` for `y = tanh(pre)`.
pub fn tanh_backward(y: &Volume, dy: &Volume) -> Volume {
    Volume {
        h: y.h,
        w: y.w,
        z: y.z,
        ch: y.ch,
        data: y.data.iter().zip(&dy.data).map(|(y, g)| g * (1.0 - y * y)).collect(),
    }
}

pub fn add_assign(acc: &mut Volume, other: &Volume) {
    acc.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
}
