use std::path::Path;

use super::{read_manifest, read_png, read_voc_xml, BBox, IrImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: IrImage,
    pub boxes: Vec<BBox>,
}

/// Loads `root/<split>.txt` and the `root/<split>/<id>.{png,xml}` pairs.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let manifest = root.join(format!("{split}.txt"));
    if !manifest.exists() {
        return Err(Error::Config(format!(
            "missing manifest {}",
            manifest.display()
        )));
    }
    let dir = root.join(split);
    read_manifest(&manifest)?
        .into_iter()
        .map(|id| {
            let image = read_png(&dir.join(format!("{id}.png")))?;
            let doc = read_voc_xml(&dir.join(format!("{id}.xml")))?;
            if (doc.width, doc.height) != (image.width, image.height) {
                return Err(Error::Data(format!(
                    "{id}: annotation size {}x{} does not match image {}x{}",
                    doc.width, doc.height, image.width, image.height
                )));
            }
            Ok(Sample {
                id,
                boxes: doc.boxes(),
                image,
            })
        })
        .collect()
}
