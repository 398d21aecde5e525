//! Track CSV: a header line, then `video_id,frame,track_id,x,y,w,h,occluded`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{BoundingBox, IngestError, Track, TrackKey};

const COLUMNS: [&str; 8] = ["video_id", "frame", "track_id", "x", "y", "w", "h", "occluded"];

pub fn parse_tracks(path: &Path) -> Result<Vec<Track>, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_tracks(file)
}

/// Parses rows and groups them into tracks ordered by `(video_id, track_id)`,
/// each sorted by frame index.
pub fn read_tracks<R: Read>(reader: R) -> Result<Vec<Track>, IngestError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut groups: BTreeMap<TrackKey, Vec<(u64, BoundingBox)>> = BTreeMap::new();
    for record in csv.records() {
        let record = record.map_err(|e| IngestError::Row {
            row: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line());
        let err = |message: String| IngestError::Row { row, message };
        if record.len() != COLUMNS.len() {
            return Err(err(format!(
                "expected {} fields, found {}",
                COLUMNS.len(),
                record.len()
            )));
        }
        let int = |i: usize| -> Result<u64, IngestError> {
            record[i]
                .parse::<u64>()
                .map_err(|_| err(format!("{} is not a non-negative integer: {:?}", COLUMNS[i], &record[i])))
        };
        let real = |i: usize| -> Result<f64, IngestError> {
            record[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{} is not a number: {:?}", COLUMNS[i], &record[i])))
        };
        let video_id = u32::try_from(int(0)?).map_err(|_| err("video_id out of range".into()))?;
        let frame_index = int(1)?;
        let track_id = u32::try_from(int(2)?).map_err(|_| err("track_id out of range".into()))?;
        let (x, y, w, h) = (real(3)?, real(4)?, real(5)?, real(6)?);
        if w <= 0.0 || h <= 0.0 {
            return Err(err(format!("width and height must be positive, got {w}x{h}")));
        }
        let occluded = match &record[7] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("occluded must be 0 or 1, got {other:?}"))),
        };
        groups
            .entry(TrackKey { video_id, track_id })
            .or_default()
            .push((
                row,
                BoundingBox {
                    frame_index,
                    x,
                    y,
                    w,
                    h,
                    occluded,
                },
            ));
    }
    groups
        .into_iter()
        .map(|(key, mut rows)| {
            rows.sort_by_key(|(_, b)| b.frame_index);
            if let Some(pair) = rows
                .windows(2)
                .find(|p| p[0].1.frame_index == p[1].1.frame_index)
            {
                let row = pair[0].0.max(pair[1].0);
                return Err(IngestError::Row {
                    row,
                    message: format!(
                        "non-increasing frame: frame {} repeated for track {} in video {}",
                        pair[1].1.frame_index, key.track_id, key.video_id
                    ),
                });
            }
            Ok(Track {
                track_id: key.track_id,
                video_id: key.video_id,
                boxes: rows.into_iter().map(|(_, b)| b).collect(),
            })
        })
        .collect()
}

/// Writes tracks in the CSV dialect `read_tracks` accepts, ordered by frame.
pub fn write_tracks<W: Write>(tracks: &[Track], writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(COLUMNS)?;
    let mut rows: Vec<(u32, u64, u32, &BoundingBox)> = tracks
        .iter()
        .flat_map(|t| t.boxes.iter().map(move |b| (t.video_id, b.frame_index, t.track_id, b)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1, r.2));
    for (video, frame, track, b) in rows {
        out.write_record([
            video.to_string(),
            frame.to_string(),
            track.to_string(),
            b.x.to_string(),
            b.y.to_string(),
            b.w.to_string(),
            b.h.to_string(),
            u8::from(b.occluded).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
