use crate::protohead::Orientation;
use crate::volume::Volume;
use crate::{Error, Result};

/// A canonical volume with its zero-based class.
#[derive(Debug, Clone)]
pub struct LabeledVolume {
    pub id: String,
    pub class: usize,
    pub volume: Volume,
}

/// One 2D training/inference input.
#[derive(Debug, Clone, Copy)]
pub struct SliceSample<'a> {
    pub pixels: &'a [f32],
    pub orientation: Orientation,
    /// Zero-based position along the orientation's axis.
    pub slice: usize,
    /// Zero-based class.
    pub class: usize,
}

impl<'a> SliceSample<'a> {
    pub fn new(pixels: &'a [f32], orientation: Orientation, slice: usize, class: usize) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            orientation,
            slice,
            class,
        })
    }
}

/// Every slice of every orientation of a set of labeled canonical volumes.
///
/// Sample `i` is volume `i / (3·S)`, orientation `(i / S) % 3`, slice `i % S`.
/// Pixels are gathered on demand.
#[derive(Debug, Clone)]
pub struct SliceDataset {
    side: usize,
    class_names: Vec<String>,
    items: Vec<LabeledVolume>,
}

impl SliceDataset {
    pub fn new(items: Vec<LabeledVolume>, class_names: Vec<String>) -> Result<Self> {
        let side = match items.first() {
            Some(v) => v.volume.cube_side().unwrap_or(0),
            None => 0,
        };
        for it in &items {
            if it.volume.cube_side() != Some(side) || side == 0 {
                return Err(Error::Dimension(format!(
                    "volume {} has dims {:?}; all volumes must share one cubic grid",
                    it.id,
                    it.volume.dims()
                )));
            }
            if it.class >= class_names.len() {
                return Err(Error::Input(format!(
                    "volume {} has class {} but only {} classes are defined",
                    it.id,
                    it.class + 1,
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            side,
            class_names,
            items,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn volumes(&self) -> &[LabeledVolume] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len() * 3 * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locate(&self, idx: usize) -> (usize, Orientation, usize) {
        let s = self.side;
        (idx / (3 * s), Orientation::ALL[(idx / s) % 3], idx % s)
    }

    /// Writes the pixels of sample `idx` into `buf` and returns its metadata.
    pub fn fill<'b>(&self, idx: usize, buf: &'b mut [f32]) -> SliceSample<'b> {
        let (v, orientation, slice) = self.locate(idx);
        let item = &self.items[v];
        item.volume.slice_into(orientation, slice, buf);
        SliceSample {
            pixels: buf,
            orientation,
            slice,
            class: item.class,
        }
    }
}
