//! Binary PPM (P6, maxval 255) frames in a directory, `frame_0000.ppm`, ...

use std::path::Path;

use crate::error::{file_err, invalid, Error, Result};
use crate::stubs::PixelVideo;

/// Channel-major `[3, h, w]` frame in [0, 1] → P6 bytes.
pub fn encode_ppm(frame: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if frame.len() != 3 * h * w {
        return Err(invalid(format!("frame has {} values, expected {}", frame.len(), 3 * h * w)));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            out.push((frame[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(Error::Format("truncated PPM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad PPM {what}: {:?}", String::from_utf8_lossy(tok))))
}

/// P6 bytes → `(channel-major frame, h, w)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Format("not a binary PPM (expected P6)".into()));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval must be 255, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("empty PPM extent {w}x{h}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("truncated PPM header".into()));
    }
    let raster = &bytes[pos + 1..];
    let plane = h * w;
    if raster.len() != 3 * plane {
        return Err(Error::Format(format!("PPM raster has {} bytes, expected {}", raster.len(), 3 * plane)));
    }
    let mut frame = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            frame[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok((frame, h, w))
}

/// Reads every `*.ppm` in `dir`, sorted by file name.
pub fn read_video_dir(dir: &Path) -> Result<PixelVideo> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .and_then(|it| it.map(|e| e.map(|e| e.path())).collect::<std::io::Result<Vec<_>>>())
        .map_err(|e| file_err(dir, e))?;
    paths.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    if paths.is_empty() {
        return Err(invalid(format!("no .ppm frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let mut extent = None;
    for p in &paths {
        let bytes = std::fs::read(p).map_err(|e| file_err(p, e))?;
        let (frame, h, w) = decode_ppm(&bytes).map_err(|e| file_err(p, e))?;
        match extent {
            None => extent = Some((h, w)),
            Some(ex) if ex != (h, w) => {
                return Err(invalid(format!("{}: extent {h}x{w} differs from {}x{}", p.display(), ex.0, ex.1)))
            }
            _ => {}
        }
        frames.push(frame);
    }
    let (h, w) = extent.expect("at least one frame");
    PixelVideo::from_frames(&frames, h, w)
}

/// Writes clip 0 of `video` as `frame_0000.ppm`, ... (creating `dir`).
pub fn write_video_dir(dir: &Path, video: &PixelVideo) -> Result<()> {
    if video.shape()[0] != 1 {
        return Err(invalid(format!("can only write one clip, video holds {}", video.shape()[0])));
    }
    std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    for f in 0..video.frames() {
        let bytes = encode_ppm(&video.frame(0, f), video.height(), video.width())?;
        let path = dir.join(format!("frame_{f:04}.ppm"));
        std::fs::write(&path, bytes).map_err(|e| file_err(&path, e))?;
    }
    Ok(())
}
