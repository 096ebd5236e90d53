//! Netpbm writers for visual inspection (`P6` colour, `P5` grayscale).

/// Maps `[0, 1]` to `0..=255` with ties rounded to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Binary `P6`. Single-channel input is replicated to grey RGB.
pub fn encode_rgb(height: usize, width: usize, channels: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in data.chunks_exact(channels) {
        for c in 0..3 {
            out.push(quantize(px[c.min(channels - 1)]));
        }
    }
    out
}

/// Binary `P5` from values already in `[0, 1]`.
pub fn encode_gray(height: usize, width: usize, data: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| quantize(v)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_round_to_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(2.5 / 255.0), 2);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn header_and_payload_sizes() {
        let bytes = encode_rgb(2, 3, 3, &[0.0; 18]);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 18);
        let gray = encode_gray(2, 2, &[1.0, 0.0, 0.5, 0.25]);
        assert_eq!(&gray[11..], &[255, 0, 128, 64]);
    }
}
