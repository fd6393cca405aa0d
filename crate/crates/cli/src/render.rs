//! Artifact writers: trajectory CSV, binary PGM frames, and frame stats.

use std::io::{self, Write};

use matrixflow_core::experiments::{Frame, FrameStats};
use matrixflow_core::machine::Trajectory;

/// 17 significant digits: enough to round-trip any binary64 value.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `t,node,value` rows for every watched node at every time step.
pub fn write_trajectory_csv(out: &mut impl Write, traj: &Trajectory) -> io::Result<()> {
    out.write_all(b"t,node,value\n")?;
    for (t, node, value) in traj.iter_rows() {
        writeln!(out, "{},{},{}", t, csv_field(node), format_value(value))?;
    }
    Ok(())
}

/// Maps a cell value to a pixel: -1 is black, 0 mid-gray, 1 white.
pub fn pixel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Binary PGM, magic `P5`, maxval 255.
pub fn write_pgm(out: &mut impl Write, frame: &Frame) -> io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", frame.width, frame.height)?;
    let bytes: Vec<u8> = frame.values.iter().map(|&v| pixel(v)).collect();
    out.write_all(&bytes)
}

pub fn write_stats_header(out: &mut impl Write) -> io::Result<()> {
    out.write_all(b"t,mean_abs,max_abs,rms\n")
}

pub fn write_stats_row(out: &mut impl Write, t: u64, stats: &FrameStats) -> io::Result<()> {
    writeln!(
        out,
        "{},{},{},{}",
        t,
        format_value(stats.mean_abs),
        format_value(stats.max_abs),
        format_value(stats.rms)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_is_exact_at_the_anchors() {
        assert_eq!(pixel(0.0), 128);
        assert_eq!(pixel(1.0), 255);
        assert_eq!(pixel(-1.0), 0);
        assert_eq!(pixel(2.0), 255);
        assert_eq!(pixel(-7.0), 0);
    }

    #[test]
    fn golden_pgm_bytes() {
        let frame = Frame {
            width: 4,
            height: 4,
            values: vec![
                0.0, 1.0, -1.0, 0.5, //
                -0.5, 0.25, -0.25, 0.75, //
                1.0, 1.0, -1.0, -1.0, //
                0.0, 0.0, 0.1, -0.1,
            ],
        };
        let mut buf = Vec::new();
        write_pgm(&mut buf, &frame).unwrap();
        let expected_header = b"P5\n4 4\n255\n";
        assert_eq!(&buf[..expected_header.len()], expected_header);
        let body = &buf[expected_header.len()..];
        assert_eq!(
            body,
            &[
                128, 255, 0, 191, //
                64, 159, 96, 223, //
                255, 255, 0, 0, //
                128, 128, 140, 115
            ]
        );
    }

    #[test]
    fn csv_values_round_trip_binary64() {
        for v in [0.1, 2.0 / 3.0, 1e-300, -3.5e17, 0.30000000000000004] {
            let s = format_value(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn csv_fields_with_commas_are_quoted() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
