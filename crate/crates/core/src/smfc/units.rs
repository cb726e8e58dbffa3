//! Stereo encoder/decoder units and the cross-view interaction between them.

use rand::Rng;

use super::config::{stage_strides, CrossViewKind};
use crate::error::Result;
use crate::nn::{Conv2d, ConvTranspose2d, Cost, LEAKY_SLOPE};
use crate::tensor::{Graph, ParamStore, Real, Var};

/// A pair of per-view values flowing through the stereo units.
pub type ViewPair = (Var, Var);

#[derive(Debug, Clone)]
struct Direction {
    proj: Conv2d,
    fuse: Conv2d,
}

impl Direction {
    fn apply<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, own: Var, other: Var) -> Result<Var> {
        let p = self.proj.forward(g, s, other)?;
        let cat = g.concat_channels(own, p)?;
        let f = self.fuse.forward(g, s, cat)?;
        g.add(own, f)
    }
}

/// Bi-directional exchange between the two views of a `channels`-wide feature.
#[derive(Debug, Clone)]
pub struct CrossView {
    kind: CrossViewKind,
    dirs: Option<[Direction; 2]>,
}

impl CrossView {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: CrossViewKind,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dirs = match kind {
            CrossViewKind::Disabled => None,
            CrossViewKind::ProjectFuse => {
                let mut dir = |tag: &str| -> Result<Direction> {
                    Ok(Direction {
                        proj: Conv2d::new(store, &format!("{name}.{tag}.proj"), channels, channels, 1, 1, rng)?,
                        fuse: Conv2d::new(store, &format!("{name}.{tag}.fuse"), 2 * channels, channels, 3, 1, rng)?,
                    })
                };
                Some([dir("into_left")?, dir("into_right")?])
            }
        };
        Ok(Self { kind, dirs })
    }

    pub fn kind(&self) -> CrossViewKind {
        self.kind
    }

    /// Both directions are computed from the inputs, so the exchange does not
    /// depend on evaluation order.
    pub fn apply<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, (l, r): ViewPair) -> Result<ViewPair> {
        match &self.dirs {
            None => Ok((l, r)),
            Some([to_l, to_r]) => Ok((to_l.apply(g, s, l, r)?, to_r.apply(g, s, r, l)?)),
        }
    }

    fn cost(&self, c: &mut Cost, h: usize, w: usize) {
        for d in self.dirs.iter().flatten() {
            c.conv(&d.proj, 1, h, w);
            c.conv(&d.fuse, 1, h, w);
        }
    }
}

/// Stereo encoder unit: strided convolutions (weights shared by the views)
/// with a cross-view exchange after the first one.
#[derive(Debug, Clone)]
pub struct Seu {
    convs: Vec<Conv2d>,
    cross: CrossView,
}

impl Seu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        kind: CrossViewKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        for (j, stride) in stage_strides(factor).into_iter().enumerate() {
            let ci = if j == 0 { cin } else { cout };
            convs.push(Conv2d::new(
                store,
                &format!("{name}.conv{j}"),
                ci,
                cout,
                3,
                stride,
                rng,
            )?);
        }
        let cross = CrossView::new(store, &format!("{name}.cross"), kind, cout, rng)?;
        Ok(Self { convs, cross })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, (l, r): ViewPair) -> Result<ViewPair> {
        let first = |x: Var| -> Result<Var> {
            let y = self.convs[0].forward(g, s, x)?;
            Ok(g.leaky_relu(y, LEAKY_SLOPE))
        };
        let (mut l, mut r) = self.cross.apply(g, s, (first(l)?, first(r)?))?;
        let last = self.convs.len() - 1;
        for (j, conv) in self.convs.iter().enumerate().skip(1) {
            l = conv.forward(g, s, l)?;
            r = conv.forward(g, s, r)?;
            if j < last {
                l = g.leaky_relu(l, LEAKY_SLOPE);
                r = g.leaky_relu(r, LEAKY_SLOPE);
            }
        }
        Ok((l, r))
    }

    /// Adds this unit's cost for both views; returns the output extent.
    pub fn cost(&self, c: &mut Cost, mut h: usize, mut w: usize) -> (usize, usize) {
        for (j, conv) in self.convs.iter().enumerate() {
            c.conv(conv, 2, h, w);
            (h, w) = (conv.out_extent(h), conv.out_extent(w));
            if j == 0 {
                self.cross.cost(c, h, w);
            }
        }
        (h, w)
    }
}

/// Stereo decoder unit: cross-view exchange, then transposed convolutions
/// that undo the matching encoder unit's spatial factor.
#[derive(Debug, Clone)]
pub struct Sdu {
    cross: CrossView,
    convs: Vec<ConvTranspose2d>,
}

impl Sdu {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        kind: CrossViewKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cross = CrossView::new(store, &format!("{name}.cross"), kind, cin, rng)?;
        let strides = stage_strides(factor);
        let last = strides.len() - 1;
        let mut convs = Vec::new();
        for (j, stride) in strides.into_iter().enumerate() {
            let co = if j == last { cout } else { cin };
            convs.push(ConvTranspose2d::new(
                store,
                &format!("{name}.deconv{j}"),
                cin,
                co,
                stride,
                rng,
            )?);
        }
        Ok(Self { cross, convs })
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, s: &ParamStore<T>, pair: ViewPair) -> Result<ViewPair> {
        let (mut l, mut r) = self.cross.apply(g, s, pair)?;
        let last = self.convs.len() - 1;
        for (j, conv) in self.convs.iter().enumerate() {
            l = conv.forward(g, s, l)?;
            r = conv.forward(g, s, r)?;
            if j < last {
                l = g.leaky_relu(l, LEAKY_SLOPE);
                r = g.leaky_relu(r, LEAKY_SLOPE);
            }
        }
        Ok((l, r))
    }

    pub fn cost(&self, c: &mut Cost, mut h: usize, mut w: usize) -> (usize, usize) {
        self.cross.cost(c, h, w);
        for conv in &self.convs {
            c.convt(conv, 2, h, w);
            (h, w) = (conv.out_extent(h), conv.out_extent(w));
        }
        (h, w)
    }
}
