//! Grounding corpus hygiene: bbox-area and category-count filters, the
//! short/long caption split, inline bbox span parsing, and validation of
//! specialist turns before they enter the corpus.

use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{word_count, QATurn, Specialist};
use crate::spatialqa::BBox2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GritBox {
    pub category: String,
    pub bbox: BBox2D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GritRecord {
    pub id: String,
    pub image_ref: String,
    pub width: u32,
    pub height: u32,
    pub caption: String,
    pub boxes: Vec<GritBox>,
}

fn bbox_valid(b: &BBox2D, width: u32, height: u32) -> bool {
    b.xmin >= 0
        && b.ymin >= 0
        && b.xmin < b.xmax
        && b.ymin < b.ymax
        && b.xmax <= width as i32
        && b.ymax <= height as i32
}

fn bbox_area(b: &BBox2D) -> i64 {
    (b.xmax - b.xmin) as i64 * (b.ymax - b.ymin) as i64
}

/// Drops boxes whose area exceeds `max_area_fraction` of the image
/// (strictly greater; a box at exactly the threshold is kept).
pub fn filter_boxes(rec: &GritRecord, max_area_fraction: f64) -> GritRecord {
    let image_area = rec.width as f64 * rec.height as f64;
    let mut out = rec.clone();
    out.boxes
        .retain(|b| bbox_area(&b.bbox) as f64 / image_area <= max_area_fraction);
    out
}

/// Drops the whole record when any category has more than
/// `max_same_category` instances.
pub fn filter_image(rec: &GritRecord, max_same_category: usize) -> Option<GritRecord> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for b in &rec.boxes {
        *counts.entry(b.category.as_str()).or_default() += 1;
    }
    if counts.values().any(|&c| c > max_same_category) {
        None
    } else {
        Some(rec.clone())
    }
}

/// Partitions records by caption word count: < threshold goes short,
/// >= threshold goes long.
pub fn split_by_length(
    records: Vec<GritRecord>,
    word_threshold: usize,
) -> (Vec<GritRecord>, Vec<GritRecord>) {
    records
        .into_iter()
        .partition(|r| word_count(&r.caption) < word_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedSpan {
    pub text_span: String,
    pub bbox: BBox2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCaption {
    pub spans: Vec<GroundedSpan>,
    pub dropped: usize,
}

/// Extracts every maximal `[int,int,int,int]` token and binds it to the
/// text since the previous box (or sentence start). Spans with out-of-bounds
/// or inverted boxes are dropped and counted.
pub fn parse_grounded_caption(text: &str, width: u32, height: u32) -> ParsedCaption {
    let re = Regex::new(r"\[(-?\d+),(-?\d+),(-?\d+),(-?\d+)\]").expect("bbox regex");
    let mut spans = Vec::new();
    let mut dropped = 0usize;
    let mut cursor = 0usize;
    for caps in re.captures_iter(text) {
        let whole = caps.get(0).unwrap();
        let preceding = &text[cursor..whole.start()];
        // Bind to the text after the last sentence boundary before the box.
        let span_text = preceding
            .rsplit(['.', '!', '?'])
            .next()
            .unwrap_or(preceding)
            .trim()
            .to_string();
        cursor = whole.end();
        let nums: Vec<i32> = (1..=4)
            .map(|i| caps[i].parse::<i32>().unwrap_or(i32::MIN))
            .collect();
        let bbox = BBox2D {
            xmin: nums[0],
            ymin: nums[1],
            xmax: nums[2],
            ymax: nums[3],
        };
        if !bbox_valid(&bbox, width, height) || span_text.is_empty() {
            dropped += 1;
            continue;
        }
        spans.push(GroundedSpan {
            text_span: span_text,
            bbox,
        });
    }
    ParsedCaption { spans, dropped }
}

/// Validates a specialist answer before it becomes a QATurn: grounding and
/// spatial answers must carry at least one valid bbox span; ocr answers
/// must be non-empty text.
pub fn validate_specialist_turn(
    kind: Specialist,
    question: &str,
    answer: &str,
    width: u32,
    height: u32,
    round: u32,
) -> Option<QATurn> {
    if question.trim().is_empty() || answer.trim().is_empty() {
        return None;
    }
    match kind {
        Specialist::Grounding | Specialist::Spatial => {
            let parsed = parse_grounded_caption(answer, width, height);
            let has_span = !parsed.spans.is_empty()
                // A bare bbox answer (spatial style) has no preceding text.
                || {
                    let re = Regex::new(r"^\[(-?\d+),(-?\d+),(-?\d+),(-?\d+)\]$").unwrap();
                    re.captures(answer.trim())
                        .map(|caps| {
                            let nums: Vec<i32> =
                                (1..=4).map(|i| caps[i].parse().unwrap_or(i32::MIN)).collect();
                            bbox_valid(
                                &BBox2D {
                                    xmin: nums[0],
                                    ymin: nums[1],
                                    xmax: nums[2],
                                    ymax: nums[3],
                                },
                                width,
                                height,
                            )
                        })
                        .unwrap_or(false)
                };
            if !has_span {
                return None;
            }
        }
        Specialist::Ocr => {}
    }
    Some(QATurn {
        specialist: kind,
        question: question.to_string(),
        answer: answer.to_string(),
        round,
    })
}

/// Reads GRIT-style JSONL records, skipping records whose boxes violate the
/// image bounds; returns records plus a skip count.
pub fn read_grit_records<R: std::io::Read>(source: R) -> std::io::Result<(Vec<GritRecord>, usize)> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(source);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<GritRecord>(&line) {
            Ok(rec) if rec.boxes.iter().all(|b| bbox_valid(&b.bbox, rec.width, rec.height)) => {
                records.push(rec)
            }
            _ => skipped += 1,
        }
    }
    Ok((records, skipped))
}
