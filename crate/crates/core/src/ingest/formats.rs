//! On-disk formats shared by the generator and the loader.
//!
//! * episode CSV: `hour,f1,...,f17`, empty cell = unobserved
//! * listfile CSV: `stay_id,subject_id,start_h,end_h,y1,...,y25`
//! * label groups CSV: `label_index,group`
//! * image metadata CSV: `image_id,subject_id,taken_at_h,r1,...,r14`
//! * images: binary PGM (`P5`, maxval 255) named `<image_id>.pgm`
//! * split CSV: `subject_id,split`

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::encoders::{LabelGroup, AUX_LABELS, TASK_LABELS};
use crate::error::{Error, Result};

use super::types::{EventRow, Split, NUM_FEATURES};

pub const LISTFILE: &str = "listfile.csv";
pub const LABEL_GROUPS: &str = "label_groups.csv";
pub const IMAGE_METADATA: &str = "image_metadata.csv";
pub const SPLITS: &str = "splits.csv";
pub const EPISODE_DIR: &str = "episodes";
pub const IMAGE_DIR: &str = "images";

pub fn episode_path(root: &Path, stay_id: u64) -> PathBuf {
    root.join(EPISODE_DIR).join(format!("{stay_id}.csv"))
}

pub fn image_path(root: &Path, image_id: &str) -> PathBuf {
    root.join(IMAGE_DIR).join(format!("{image_id}.pgm"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ListEntry {
    pub stay_id: u64,
    pub subject_id: u64,
    pub start_h: f64,
    pub end_h: f64,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMeta {
    pub image_id: String,
    pub subject_id: u64,
    pub taken_at_h: f64,
    pub labels: Vec<u8>,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[String]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::format(path, format!("unexpected header {:?}", got)));
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad {field} value {raw:?}")))
}

fn parse_bit(path: &Path, line: usize, raw: &str) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::format(path, format!("line {line}: label must be 0 or 1, got {other:?}"))),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Shortest string that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn episode_header() -> Vec<String> {
    let mut h = vec!["hour".to_string()];
    h.extend((1..=NUM_FEATURES).map(|j| format!("f{j}")));
    h
}

pub fn read_episode(path: &Path) -> Result<Vec<EventRow>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &episode_header())?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let hour = parse(path, line, "hour", &rec[0])?;
        let mut values = [None; NUM_FEATURES];
        for (j, v) in values.iter_mut().enumerate() {
            let raw = rec[j + 1].trim();
            if !raw.is_empty() {
                let x: f64 = parse(path, line, &format!("f{}", j + 1), raw)?;
                if !x.is_finite() {
                    return Err(Error::format(path, format!("line {line}: non-finite value")));
                }
                *v = Some(x);
            }
        }
        rows.push(EventRow { hour, values });
    }
    Ok(rows)
}

pub fn write_episode(path: &Path, rows: &[EventRow]) -> Result<()> {
    let mut out = episode_header().join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_f64(row.hour));
        for v in &row.values {
            out.push(',');
            if let Some(x) = v {
                out.push_str(&fmt_f64(*x));
            }
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn listfile_header() -> Vec<String> {
    let mut h: Vec<String> = ["stay_id", "subject_id", "start_h", "end_h"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=TASK_LABELS).map(|k| format!("y{k}")));
    h
}

pub fn read_listfile(path: &Path) -> Result<Vec<ListEntry>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &listfile_header())?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let labels = (0..TASK_LABELS)
            .map(|k| parse_bit(path, line, &rec[4 + k]))
            .collect::<Result<_>>()?;
        out.push(ListEntry {
            stay_id: parse(path, line, "stay_id", &rec[0])?,
            subject_id: parse(path, line, "subject_id", &rec[1])?,
            start_h: parse(path, line, "start_h", &rec[2])?,
            end_h: parse(path, line, "end_h", &rec[3])?,
            labels,
        });
    }
    Ok(out)
}

pub fn write_listfile(path: &Path, entries: &[ListEntry]) -> Result<()> {
    let mut out = listfile_header().join(",");
    out.push('\n');
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{}",
            e.stay_id,
            e.subject_id,
            fmt_f64(e.start_h),
            fmt_f64(e.end_h)
        ));
        for y in &e.labels {
            out.push_str(&format!(",{y}"));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_label_groups(path: &Path) -> Result<Vec<LabelGroup>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["label_index".to_string(), "group".to_string()])?;
    let mut slots: Vec<Option<LabelGroup>> = vec![None; TASK_LABELS];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let idx: usize = parse(path, line, "label_index", &rec[0])?;
        if idx == 0 || idx > TASK_LABELS {
            return Err(Error::format(path, format!("line {line}: label_index {idx} out of 1..={TASK_LABELS}")));
        }
        let group = rec[1]
            .trim()
            .parse::<LabelGroup>()
            .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        if slots[idx - 1].replace(group).is_some() {
            return Err(Error::format(path, format!("line {line}: duplicate label_index {idx}")));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, g)| g.ok_or_else(|| Error::format(path, format!("label_index {} missing", i + 1))))
        .collect()
}

pub fn write_label_groups(path: &Path, groups: &[LabelGroup]) -> Result<()> {
    let mut out = String::from("label_index,group\n");
    for (i, g) in groups.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, g));
    }
    write_file(path, &out)
}

pub fn image_metadata_header() -> Vec<String> {
    let mut h: Vec<String> = ["image_id", "subject_id", "taken_at_h"].iter().map(|s| s.to_string()).collect();
    h.extend((1..=AUX_LABELS).map(|k| format!("r{k}")));
    h
}

pub fn read_image_metadata(path: &Path) -> Result<Vec<ImageMeta>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &image_metadata_header())?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let labels = (0..AUX_LABELS)
            .map(|k| parse_bit(path, line, &rec[3 + k]))
            .collect::<Result<_>>()?;
        out.push(ImageMeta {
            image_id: rec[0].trim().to_string(),
            subject_id: parse(path, line, "subject_id", &rec[1])?,
            taken_at_h: parse(path, line, "taken_at_h", &rec[2])?,
            labels,
        });
    }
    Ok(out)
}

pub fn write_image_metadata(path: &Path, entries: &[ImageMeta]) -> Result<()> {
    let mut out = image_metadata_header().join(",");
    out.push('\n');
    for e in entries {
        out.push_str(&format!("{},{},{}", e.image_id, e.subject_id, fmt_f64(e.taken_at_h)));
        for y in &e.labels {
            out.push_str(&format!(",{y}"));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn read_splits(path: &Path) -> Result<Vec<(u64, Split)>> {
    let mut rdr = reader(path)?;
    check_header(path, &mut rdr, &["subject_id".to_string(), "split".to_string()])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let split = rec[1]
            .trim()
            .parse::<Split>()
            .map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        out.push((parse(path, line, "subject_id", &rec[0])?, split));
    }
    Ok(out)
}

pub fn write_splits(path: &Path, entries: &[(u64, Split)]) -> Result<()> {
    let mut out = String::from("subject_id,split\n");
    for (s, split) in entries {
        out.push_str(&format!("{s},{split}\n"));
    }
    write_file(path, &out)
}

/// Reads a binary `P5` PGM with maxval 255 as `(width, height, bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, why.to_string());
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad PGM width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad PGM height"))?;
    if tokens[3] != "255" {
        return Err(bad("PGM maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).ok_or_else(|| bad("missing PGM raster"))?;
    if raster.len() != width * height {
        return Err(bad("PGM raster size does not match its header"));
    }
    Ok((width, height, raster.to_vec()))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    file.write_all(pixels).map_err(|e| Error::io(path, e))
}
