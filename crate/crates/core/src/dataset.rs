//! Labelled sample collections and their on-disk formats (DSET, IDX).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ClassRestriction;
use crate::tensor::Tensor;

const DSET_MAGIC: &[u8; 5] = b"DSET1";
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn bad(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

/// Equally shaped samples with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    samples: Vec<Tensor>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(bad(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        let sample_shape = samples.first().map(|s| s.shape().to_vec()).unwrap_or_default();
        if let Some(s) = samples.iter().find(|s| s.shape() != sample_shape) {
            return Err(bad(format!("sample shape {:?} differs from {:?}", s.shape(), sample_shape)));
        }
        Ok(Self { sample_shape, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&Tensor, usize) {
        (&self.samples[i], self.labels[i])
    }

    /// Sample indices per label, in dataset order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sample_shape: self.sample_shape.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keep samples of the restricted classes, relabelled to their position in the restriction.
    pub fn restrict(&self, restriction: &ClassRestriction) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| restriction.remap(self.labels[i]).is_some()).collect();
        let mut out = self.subset(&keep);
        for l in &mut out.labels {
            *l = restriction.remap(*l).expect("filtered");
        }
        out
    }

    /// Mean over samples and spatial positions per channel (axis 0 for rank ≥ 2 samples).
    pub fn channel_mean(&self) -> Vec<f64> {
        let channels = if self.sample_shape.len() >= 2 { self.sample_shape[0] } else { 1 };
        let per = self.sample_shape.iter().product::<usize>() / channels.max(1);
        let mut sums = vec![0.0; channels];
        for s in &self.samples {
            for (i, v) in s.data().iter().enumerate() {
                sums[i / per.max(1)] += *v as f64;
            }
        }
        let n = (self.len() * per).max(1) as f64;
        sums.iter().map(|s| s / n).collect()
    }

    pub fn to_dset_bytes(&self) -> Vec<u8> {
        let mut out = DSET_MAGIC.to_vec();
        out.extend((self.len() as u32).to_le_bytes());
        out.extend((self.sample_shape.len() as u32).to_le_bytes());
        for &d in &self.sample_shape {
            out.extend((d as u32).to_le_bytes());
        }
        for s in &self.samples {
            for v in s.data() {
                out.extend(v.to_le_bytes());
            }
        }
        for &l in &self.labels {
            out.extend((l as u32).to_le_bytes());
        }
        out
    }

    pub fn from_dset_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != DSET_MAGIC {
            return Err(bad("missing DSET1 magic"));
        }
        let count = r.u32_le()? as usize;
        let rank = r.u32_le()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32_le().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let need = count
            .checked_mul(numel)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(count * 4))
            .ok_or_else(|| bad("dataset size overflows"))?;
        if bytes.len() - r.pos != need {
            return Err(bad(format!("expected {need} payload bytes, found {}", bytes.len() - r.pos)));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let data: Vec<f32> = r.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite sample value"));
            }
            samples.push(Tensor::new(shape.clone(), data)?);
        }
        let labels = (0..count).map(|_| r.u32_le().map(|l| l as usize)).collect::<Result<_>>()?;
        let mut ds = Dataset::new(samples, labels)?;
        ds.sample_shape = shape;
        Ok(ds)
    }

    pub fn read_dset(path: &Path) -> Result<Self> {
        Self::from_dset_bytes(&std::fs::read(path)?)
    }

    pub fn write_dset(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_dset_bytes())?)
    }

    /// IDX image and label files; pixels are scaled to `[0, 1]` and shaped `[1, h, w]`.
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let mut ri = Reader { bytes: images, pos: 0 };
        if ri.u32_be()? != IDX_IMAGES {
            return Err(bad("bad IDX image magic"));
        }
        let (n, h, w) = (ri.u32_be()? as usize, ri.u32_be()? as usize, ri.u32_be()? as usize);
        let mut rl = Reader { bytes: labels, pos: 0 };
        if rl.u32_be()? != IDX_LABELS {
            return Err(bad("bad IDX label magic"));
        }
        if rl.u32_be()? as usize != n {
            return Err(bad("IDX image and label counts differ"));
        }
        let pixels = ri.take(n * h * w)?;
        let labs = rl.take(n)?;
        let samples = pixels
            .chunks_exact(h * w)
            .map(|c| Tensor::new(vec![1, h, w], c.iter().map(|&p| p as f32 / 255.0).collect()))
            .collect::<Result<_>>()?;
        Dataset::new(samples, labs.iter().map(|&l| l as usize).collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let s = |a: f32| Tensor::new(vec![2, 1], vec![a, -a]).unwrap();
        Dataset::new(vec![s(1.0), s(2.0), s(3.5)], vec![0, 2, 0]).unwrap()
    }

    #[test]
    fn dset_round_trip() {
        let d = tiny();
        let bytes = d.to_dset_bytes();
        assert_eq!(&bytes[..5], b"DSET1");
        assert_eq!(Dataset::from_dset_bytes(&bytes).unwrap(), d);
        assert!(Dataset::from_dset_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Dataset::from_dset_bytes(b"DSET0").is_err());
    }

    #[test]
    fn restriction_relabels() {
        let r = ClassRestriction::new(vec![2], 3).unwrap();
        let d = tiny().restrict(&r);
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels(), &[0]);
        assert_eq!(d.samples()[0].data(), &[2.0, -2.0]);
    }

    #[test]
    fn idx_pair() {
        let mut img = IDX_IMAGES.to_be_bytes().to_vec();
        for v in [2u32, 1, 2] {
            img.extend(v.to_be_bytes());
        }
        img.extend([0u8, 255, 51, 102]);
        let mut lab = IDX_LABELS.to_be_bytes().to_vec();
        lab.extend(2u32.to_be_bytes());
        lab.extend([7u8, 3]);
        let d = Dataset::from_idx_bytes(&img, &lab).unwrap();
        assert_eq!(d.sample_shape(), &[1, 1, 2]);
        assert_eq!(d.samples()[0].data(), &[0.0, 1.0]);
        assert_eq!(d.labels(), &[7, 3]);
        assert!(Dataset::from_idx_bytes(&lab, &img).is_err());
    }

    #[test]
    fn channel_means() {
        let d = tiny();
        assert_eq!(d.channel_mean(), vec![6.5 / 3.0, -6.5 / 3.0]);
    }
}
