//! VOC2007-style annotation files. Boxes are half-open internally and
//! written with inclusive max corners (`x_max - 1`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::Reader;

use super::BBox;
use crate::error::{Error, Result};

pub const TARGET_CLASS: &str = "target";

#[derive(Clone, Debug, PartialEq)]
pub struct VocObject {
    pub name: String,
    pub bbox: BBox,
    /// Present on detection files.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VocDocument {
    pub filename: String,
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub objects: Vec<VocObject>,
}

impl VocDocument {
    pub fn new(filename: impl Into<String>, width: usize, height: usize) -> Self {
        Self {
            filename: filename.into(),
            width,
            height,
            depth: 1,
            objects: Vec::new(),
        }
    }

    pub fn with_boxes(
        filename: impl Into<String>,
        width: usize,
        height: usize,
        boxes: &[BBox],
    ) -> Self {
        let mut d = Self::new(filename, width, height);
        d.objects = boxes
            .iter()
            .map(|&bbox| VocObject {
                name: TARGET_CLASS.into(),
                bbox,
                score: None,
            })
            .collect();
        d
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

pub fn write_voc_string(doc: &VocDocument) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    s.push_str("\t<folder>ccdnet</folder>\n");
    let _ = writeln!(
        s,
        "\t<filename>{}</filename>",
        escape(doc.filename.as_str())
    );
    s.push_str("\t<size>\n");
    let _ = writeln!(s, "\t\t<width>{}</width>", doc.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", doc.height);
    let _ = writeln!(s, "\t\t<depth>{}</depth>", doc.depth);
    s.push_str("\t</size>\n");
    s.push_str("\t<segmented>0</segmented>\n");
    for o in &doc.objects {
        s.push_str("\t<object>\n");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(o.name.as_str()));
        s.push_str("\t\t<pose>Unspecified</pose>\n\t\t<truncated>0</truncated>\n\t\t<difficult>0</difficult>\n");
        if let Some(sc) = o.score {
            let _ = writeln!(s, "\t\t<score>{sc}</score>");
        }
        s.push_str("\t\t<bndbox>\n");
        let b = o.bbox;
        let _ = writeln!(s, "\t\t\t<xmin>{}</xmin>", b.x_min);
        let _ = writeln!(s, "\t\t\t<ymin>{}</ymin>", b.y_min);
        let _ = writeln!(s, "\t\t\t<xmax>{}</xmax>", b.x_max - 1.0);
        let _ = writeln!(s, "\t\t\t<ymax>{}</ymax>", b.y_max - 1.0);
        s.push_str("\t\t</bndbox>\n\t</object>\n");
    }
    s.push_str("</annotation>\n");
    s
}

pub fn write_voc_xml(doc: &VocDocument, path: &Path) -> Result<()> {
    fs::write(path, write_voc_string(doc))?;
    Ok(())
}

#[derive(Default)]
struct PartialObject {
    name: Option<String>,
    score: Option<f64>,
    coords: [Option<f64>; 4],
}

/// Parses a VOC document; `path` only labels errors.
pub fn read_voc_str(text: &str, path: &Path) -> Result<VocDocument> {
    let err = |position: u64, message: String| Error::Parse {
        path: PathBuf::from(path),
        position,
        message,
    };
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(true);
    let mut stack: Vec<String> = Vec::new();
    let mut doc = VocDocument::new("", 0, 0);
    let (mut width, mut height) = (None, None);
    let mut obj: Option<PartialObject> = None;
    let mut saw_root = false;
    loop {
        let pos = reader.buffer_position();
        let ev = reader
            .read_event()
            .map_err(|e| err(reader.error_position(), e.to_string()))?;
        match ev {
            Event::Start(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                if stack.is_empty() {
                    if name != "annotation" {
                        return Err(err(
                            pos,
                            format!("root element <{name}>, expected <annotation>"),
                        ));
                    }
                    saw_root = true;
                }
                if name == "object" && stack.len() == 1 {
                    obj = Some(PartialObject::default());
                }
                stack.push(name);
            }
            Event::End(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                stack.pop();
                if name == "object" && stack.len() == 1 {
                    let o = obj.take().unwrap_or_default();
                    let [Some(x0), Some(y0), Some(x1), Some(y1)] = o.coords else {
                        return Err(err(pos, "object without a complete <bndbox>".into()));
                    };
                    doc.objects.push(VocObject {
                        name: o.name.unwrap_or_else(|| TARGET_CLASS.into()),
                        bbox: BBox::new(x0, y0, x1 + 1.0, y1 + 1.0),
                        score: o.score,
                    });
                }
            }
            Event::Text(t) => {
                let value = t
                    .unescape()
                    .map_err(|e| err(pos, e.to_string()))?
                    .into_owned();
                let num = |what: &str| -> Result<f64> {
                    value
                        .trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(pos, format!("<{what}> is not a number: {value:?}")))
                };
                let path: Vec<&str> = stack.iter().map(String::as_str).collect();
                match path.as_slice() {
                    ["annotation", "filename"] => doc.filename = value.clone(),
                    ["annotation", "size", "width"] => width = Some(num("width")? as usize),
                    ["annotation", "size", "height"] => height = Some(num("height")? as usize),
                    ["annotation", "size", "depth"] => doc.depth = num("depth")? as usize,
                    ["annotation", "object", "name"] => {
                        if let Some(o) = obj.as_mut() {
                            o.name = Some(value.clone());
                        }
                    }
                    ["annotation", "object", "score"] => {
                        let v = num("score")?;
                        if let Some(o) = obj.as_mut() {
                            o.score = Some(v);
                        }
                    }
                    ["annotation", "object", "bndbox", tag] => {
                        let i = match *tag {
                            "xmin" => 0,
                            "ymin" => 1,
                            "xmax" => 2,
                            "ymax" => 3,
                            _ => continue,
                        };
                        let v = num(tag)?;
                        if let Some(o) = obj.as_mut() {
                            o.coords[i] = Some(v);
                        }
                    }
                    _ => {}
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    let end = text.len() as u64;
    if !saw_root {
        return Err(err(end, "missing <annotation> element".into()));
    }
    if !stack.is_empty() {
        return Err(err(end, format!("unclosed <{}>", stack.last().unwrap())));
    }
    doc.width = width.ok_or_else(|| err(end, "missing <size><width>".into()))?;
    doc.height = height.ok_or_else(|| err(end, "missing <size><height>".into()))?;
    Ok(doc)
}

pub fn read_voc_xml(path: &Path) -> Result<VocDocument> {
    let text = fs::read_to_string(path)?;
    read_voc_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_three_boxes() {
        let boxes = [
            BBox::new(5.0, 2.0, 8.0, 5.0),
            BBox::new(0.0, 0.0, 1.0, 1.0),
            BBox::new(10.0, 11.0, 30.0, 12.0),
        ];
        let doc = VocDocument::with_boxes("a&b.png", 64, 48, &boxes);
        let s = write_voc_string(&doc);
        assert!(s.contains("<xmax>7</xmax>"));
        let back = read_voc_str(&s, Path::new("x.xml")).unwrap();
        assert_eq!(back, doc);
        assert_eq!(write_voc_string(&back), s);
    }

    #[test]
    fn empty_and_scored() {
        let doc = VocDocument::new("e.png", 4, 4);
        assert_eq!(
            read_voc_str(&write_voc_string(&doc), Path::new("e")).unwrap(),
            doc
        );
        let mut d = VocDocument::with_boxes("s.png", 9, 9, &[BBox::new(1.0, 1.0, 3.5, 4.0)]);
        d.objects[0].score = Some(0.123456789);
        assert_eq!(
            read_voc_str(&write_voc_string(&d), Path::new("s")).unwrap(),
            d
        );
    }

    #[test]
    fn malformed_reports_position() {
        let text = "<annotation><size><width>4</width><height>x</height></size></annotation>";
        match read_voc_str(text, Path::new("bad.xml")) {
            Err(Error::Parse {
                position, message, ..
            }) => {
                assert!(position > 0);
                assert!(message.contains("height"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let broken = "<annotation><size><width>4</width></annotation>";
        assert!(matches!(
            read_voc_str(broken, Path::new("b")),
            Err(Error::Parse { .. })
        ));
    }
}
