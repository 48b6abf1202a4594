use crate::error::{Error, Result};

/// Pixel value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Batch of per-pixel class indices, `N×H×W` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if n * height * width != data.len() {
            return Err(Error::shape(
                "labels",
                format!(
                    "{}×{}×{} needs {} labels, got {}",
                    n,
                    height,
                    width,
                    n * height * width,
                    data.len()
                ),
            ));
        }
        Ok(LabelMap {
            n,
            height,
            width,
            data,
        })
    }

    /// Single map (`N = 1`).
    pub fn single(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn filled(n: usize, height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            n,
            height,
            width,
            data: vec![value; n * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.height + y) * self.width + x]
    }

    /// Concatenates maps along the batch axis.
    pub fn stack(parts: &[LabelMap]) -> Result<LabelMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("labels", "nothing to stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(Error::shape(
                    "labels",
                    format!(
                        "{}×{} does not match {}×{}",
                        p.height, p.width, first.height, first.width
                    ),
                ));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        LabelMap::new(n, first.height, first.width, data)
    }

    /// Checks every value is a class below `classes` or `ignore`.
    pub fn validate(&self, classes: usize, ignore: u8) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != ignore && usize::from(l) >= classes)
        {
            Some(&label) => Err(Error::Label { label, classes }),
            None => Ok(()),
        }
    }
}
