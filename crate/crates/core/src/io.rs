//! Box files and video directories.
//!
//! A box file has one `x,y,w,h` line per frame in absolute pixels. Result
//! files and ground-truth files share the format. A video directory holds
//! frames `0001.png`, `0002.png`, ... and optionally `groundtruth.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

pub const GROUNDTRUTH: &str = "groundtruth.txt";

pub fn format_boxes(boxes: &[BBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect()
}

/// Parses `x,y,w,h` lines; blank lines are skipped.
pub fn parse_boxes(text: &str, origin: &Path) -> Result<Vec<BBox>> {
    let err = |line: usize, detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(
                i + 1,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(i + 1, format!("{f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(i + 1, format!("non-finite value {f:?}")));
            }
        }
        out.push(BBox::new(v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[BBox]) -> Result<()> {
    fs::write(path, format_boxes(boxes))?;
    Ok(())
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BBox>> {
    let path = path.as_ref();
    parse_boxes(&fs::read_to_string(path)?, path)
}

pub fn frame_name(index: usize) -> String {
    format!("{:04}.png", index + 1)
}

/// Writes frames and ground truth into `dir`, creating it if needed.
pub fn save_video(dir: impl AsRef<Path>, video: &VideoSequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, frame) in video.frames.iter().enumerate() {
        frame.save_png(dir.join(frame_name(i)))?;
    }
    write_boxes(dir.join(GROUNDTRUTH), &video.boxes)
}

/// A video read from disk.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub name: String,
    pub frames: Vec<Image>,
    pub groundtruth: Option<Vec<BBox>>,
}

/// Reads the consecutive frames `0001.png`, `0002.png`, ... of `dir`.
pub fn load_video(dir: impl AsRef<Path>) -> Result<LoadedVideo> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(Image::load_png(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: format!("no frames (expected {})", frame_name(0)),
        });
    }
    let gt_path = dir.join(GROUNDTRUTH);
    let groundtruth = if gt_path.exists() {
        Some(read_boxes(&gt_path)?)
    } else {
        None
    };
    Ok(LoadedVideo {
        name: dir_name(dir),
        frames,
        groundtruth,
    })
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Subdirectories of `root` in sorted order.
pub fn list_subdirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_text_round_trip() {
        let boxes = vec![
            BBox::new(1.5, 2.0, 30.25, 4.0),
            BBox::new(0.0, 0.1, 1e-3, 7.0),
        ];
        let parsed = parse_boxes(&format_boxes(&boxes), Path::new("mem")).unwrap();
        assert_eq!(parsed, boxes);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let p = Path::new("mem");
        assert!(parse_boxes("1,2,3\n", p).is_err());
        assert!(parse_boxes("1,2,3,x\n", p).is_err());
        assert!(parse_boxes("1,2,3,NaN\n", p).is_err());
        assert_eq!(parse_boxes("\n1, 2, 3, 4\n\n", p).unwrap().len(), 1);
    }
}
