//! PASCAL VOC annotation files.
//!
//! VOC boxes are 1-based with inclusive corners; internally a box covers the
//! half-open pixel range `[xmin − 1, xmax) × [ymin − 1, ymax)`.

use std::fmt::Write as _;
use std::path::Path;

use super::Object;
use crate::anchors::BBox;
use crate::error::{Error, Result};

/// Parsed annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub filename: Option<String>,
    pub size: Option<(usize, usize)>,
    pub objects: Vec<Object>,
}

fn parse_error(name: &str, doc: &roxmltree::Document, node: roxmltree::Node, msg: impl Into<String>) -> Error {
    let pos = doc.text_pos_at(node.range().start);
    Error::Parse {
        source_name: name.to_string(),
        location: format!("line {} column {}", pos.row, pos.col),
        message: msg.into(),
    }
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn child_text<'a>(node: roxmltree::Node<'a, '_>, tag: &str) -> Option<&'a str> {
    child(node, tag).and_then(|c| c.text()).map(str::trim)
}

/// Parses VOC XML. Object names are looked up in `classes` (class id = position + 1);
/// unknown names are rejected.
pub fn parse(xml: &str, name: &str, classes: &[String]) -> Result<Annotation> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| {
        let pos = e.pos();
        Error::Parse {
            source_name: name.to_string(),
            location: format!("line {} column {}", pos.row, pos.col),
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(parse_error(name, &doc, root, "root element must be <annotation>"));
    }
    let filename = child_text(root, "filename").map(str::to_string);
    let size = match child(root, "size") {
        Some(s) => {
            let w = child_text(s, "width").and_then(|v| v.parse().ok());
            let h = child_text(s, "height").and_then(|v| v.parse().ok());
            match (w, h) {
                (Some(w), Some(h)) => Some((w, h)),
                _ => return Err(parse_error(name, &doc, s, "<size> needs numeric <width> and <height>")),
            }
        }
        None => None,
    };
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let label = child_text(obj, "name").ok_or_else(|| parse_error(name, &doc, obj, "<object> without <name>"))?;
        let class = classes
            .iter()
            .position(|c| c == label)
            .map(|i| i + 1)
            .ok_or_else(|| parse_error(name, &doc, obj, format!("unknown class {label:?}")))?;
        let difficult = match child_text(obj, "difficult") {
            None | Some("0") => false,
            Some("1") => true,
            Some(other) => return Err(parse_error(name, &doc, obj, format!("invalid difficult flag {other:?}"))),
        };
        let bnd = child(obj, "bndbox").ok_or_else(|| parse_error(name, &doc, obj, "<object> without <bndbox>"))?;
        let mut coords = [0f64; 4];
        for (slot, tag) in coords.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
            let node = child(bnd, tag).ok_or_else(|| parse_error(name, &doc, bnd, format!("missing <{tag}>")))?;
            *slot = node
                .text()
                .map(str::trim)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| parse_error(name, &doc, node, format!("<{tag}> is not a number")))?;
        }
        let [xmin, ymin, xmax, ymax] = coords;
        if xmax < xmin || ymax < ymin {
            return Err(parse_error(name, &doc, bnd, "inverted bounding box"));
        }
        objects.push(Object {
            class,
            bbox: BBox::from_corners((xmin - 1.0) as f32, (ymin - 1.0) as f32, xmax as f32, ymax as f32),
            difficult,
        });
    }
    Ok(Annotation {
        filename,
        size,
        objects,
    })
}

pub fn read(path: &Path, classes: &[String]) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string(), classes)
}

/// Serializes an annotation. Corners are written with the VOC offset applied.
pub fn to_xml(filename: &str, width: usize, height: usize, objects: &[Object], classes: &[String]) -> Result<String> {
    let mut s = String::new();
    let _ = writeln!(s, "<annotation>");
    let _ = writeln!(s, "  <filename>{filename}</filename>");
    let _ = writeln!(
        s,
        "  <size>\n    <width>{width}</width>\n    <height>{height}</height>\n    <depth>3</depth>\n  </size>"
    );
    for o in objects {
        let label = o
            .class
            .checked_sub(1)
            .and_then(|i| classes.get(i))
            .ok_or_else(|| Error::Input(format!("class id {} has no name", o.class)))?;
        let [l, t, r, b] = o.bbox.corners();
        let _ = writeln!(s, "  <object>");
        let _ = writeln!(s, "    <name>{label}</name>");
        let _ = writeln!(s, "    <difficult>{}</difficult>", u8::from(o.difficult));
        let _ = writeln!(
            s,
            "    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>",
            l + 1.0,
            t + 1.0,
            r,
            b
        );
        let _ = writeln!(s, "  </object>");
    }
    let _ = writeln!(s, "</annotation>");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        vec!["circle".into(), "square".into(), "triangle".into()]
    }

    #[test]
    fn minimal_file_gives_one_box() {
        let xml = r#"<annotation>
  <filename>a.ppm</filename>
  <object>
    <name>square</name>
    <bndbox><xmin>11</xmin><ymin>21</ymin><xmax>30</xmax><ymax>40</ymax></bndbox>
  </object>
</annotation>"#;
        let a = parse(xml, "a.xml", &classes()).unwrap();
        assert_eq!(a.objects.len(), 1);
        let o = a.objects[0];
        assert_eq!(o.class, 2);
        assert_eq!(o.bbox.corners(), [10.0, 20.0, 30.0, 40.0]);
        assert!(!o.difficult);
    }

    #[test]
    fn difficult_flag_is_read() {
        let xml = "<annotation><object><name>circle</name><difficult>1</difficult>\
                   <bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object></annotation>";
        assert!(parse(xml, "d", &classes()).unwrap().objects[0].difficult);
    }

    #[test]
    fn unknown_class_is_rejected_with_location() {
        let xml = "<annotation>\n<object><name>dog</name><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>5</ymax></bndbox></object></annotation>";
        let e = parse(xml, "u.xml", &classes()).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("dog"), "{msg}");
    }

    #[test]
    fn malformed_xml_reports_position() {
        let e = parse("<annotation>\n  <object>\n</annotation>", "m.xml", &classes()).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn written_xml_parses_back() {
        let objs = vec![Object {
            class: 3,
            bbox: BBox::from_corners(4.0, 5.0, 60.0, 70.0),
            difficult: false,
        }];
        let xml = to_xml("x.ppm", 128, 128, &objs, &classes()).unwrap();
        let a = parse(&xml, "x", &classes()).unwrap();
        assert_eq!(a.objects, objs);
        assert_eq!(a.size, Some((128, 128)));
    }
}
