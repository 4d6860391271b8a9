//! Deterministic verb interpreter standing in for free-form model code.
//!
//! One verb per line, applied to a working image that starts as the first
//! input image:
//!
//! ```text
//! rotate 90|180|270      clockwise
//! crop x y w h
//! brightness factor
//! blur sigma
//! denoise [radius]       median filter, radius defaults to 1
//! save name              capture the working image as an output
//! ```
//!
//! Blank lines are skipped.

use std::time::Instant;

use thiserror::Error;

use super::{CodeRequest, CodeResponse, ExecStatus};
use crate::imagekit::{self, ImageBuffer};

#[derive(Debug, Clone, PartialEq)]
pub enum Verb {
    Rotate(u32),
    Crop { x: u32, y: u32, w: u32, h: u32 },
    Brightness(f64),
    Blur(f64),
    Denoise(u32),
    Save(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("empty script")]
    Empty,
    #[error("line {line}: {message}: {text:?}")]
    Line { line: usize, text: String, message: String },
}

fn parse_line(text: &str) -> Result<Verb, String> {
    let mut parts = text.split_whitespace();
    let verb = parts.next().unwrap_or_default();
    let args: Vec<&str> = parts.collect();
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("`{verb}` takes {n} argument(s), got {}", args.len()))
        }
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("not a number: {s}"))
    };
    let int = |s: &str| s.parse::<u32>().map_err(|_| format!("not a non-negative integer: {s}"));
    match verb {
        "rotate" => {
            arity(1)?;
            match args[0] {
                "90" => Ok(Verb::Rotate(90)),
                "180" => Ok(Verb::Rotate(180)),
                "270" => Ok(Verb::Rotate(270)),
                other => Err(format!("rotation must be 90, 180 or 270, got {other}")),
            }
        }
        "crop" => {
            arity(4)?;
            Ok(Verb::Crop {
                x: int(args[0])?,
                y: int(args[1])?,
                w: int(args[2])?,
                h: int(args[3])?,
            })
        }
        "brightness" => {
            arity(1)?;
            Ok(Verb::Brightness(num(args[0])?))
        }
        "blur" => {
            arity(1)?;
            Ok(Verb::Blur(num(args[0])?))
        }
        "denoise" => match args.as_slice() {
            [] => Ok(Verb::Denoise(1)),
            [r] => Ok(Verb::Denoise(int(r)?)),
            _ => Err(format!("`denoise` takes at most 1 argument, got {}", args.len())),
        },
        "save" => {
            arity(1)?;
            Ok(Verb::Save(args[0].to_string()))
        }
        other => Err(format!("unknown verb `{other}`")),
    }
}

pub fn builtin_parse(code: &str) -> Result<Vec<Verb>, ParseError> {
    let mut verbs = Vec::new();
    for (i, line) in code.lines().enumerate() {
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        verbs.push(parse_line(text).map_err(|message| ParseError::Line {
            line: i + 1,
            text: text.to_string(),
            message,
        })?);
    }
    if verbs.is_empty() {
        return Err(ParseError::Empty);
    }
    Ok(verbs)
}

fn apply(img: &ImageBuffer, verb: &Verb) -> Result<ImageBuffer, imagekit::ImageError> {
    match verb {
        Verb::Rotate(deg) => Ok(imagekit::rotate(img, (*deg / 90) as i32)),
        Verb::Crop { x, y, w, h } => imagekit::crop(img, *x, *y, *w, *h),
        Verb::Brightness(f) => imagekit::adjust_brightness(img, *f),
        Verb::Blur(s) => imagekit::gaussian_blur(img, *s),
        Verb::Denoise(r) => imagekit::median_denoise(img, *r),
        Verb::Save(_) => Ok(img.clone()),
    }
}

/// Runs a verb script. The wall-time limit is checked between verbs.
pub fn run_script(req: &CodeRequest) -> CodeResponse {
    let started = Instant::now();
    let verbs = match builtin_parse(&req.code) {
        Ok(v) => v,
        Err(e) => return CodeResponse::failure(ExecStatus::RuntimeError, format!("parse error: {e}")),
    };
    let Some((_, first)) = req.input_images.first() else {
        return CodeResponse::failure(ExecStatus::RuntimeError, "no input image".into());
    };
    let mut current = first.clone();
    let mut outputs: Vec<(String, ImageBuffer)> = Vec::new();
    for (i, verb) in verbs.iter().enumerate() {
        if started.elapsed() > req.limits.wall_time() {
            return CodeResponse::failure(ExecStatus::Timeout, format!("wall time exceeded before verb {}", i + 1));
        }
        current = match apply(&current, verb) {
            Ok(img) => img,
            Err(e) => return CodeResponse::failure(ExecStatus::RuntimeError, format!("verb {} ({verb:?}): {e}", i + 1)),
        };
        if let Verb::Save(name) = verb {
            match outputs.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 = current.clone(),
                None => outputs.push((name.clone(), current.clone())),
            }
        }
    }
    CodeResponse {
        status: ExecStatus::Ok,
        stdout: String::new(),
        stderr: String::new(),
        output_images: outputs,
    }
}
