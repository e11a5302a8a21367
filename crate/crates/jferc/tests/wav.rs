use jferc::wav::{encode_wav, parse_wav, read_wav, write_wav, Encoding, WavError};

fn header(tag: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
    let block = channels * bits / 8;
    let mut v = Vec::new();
    v.extend_from_slice(b"RIFF");
    v.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
    v.extend_from_slice(b"WAVEfmt ");
    v.extend_from_slice(&16u32.to_le_bytes());
    v.extend_from_slice(&tag.to_le_bytes());
    v.extend_from_slice(&channels.to_le_bytes());
    v.extend_from_slice(&rate.to_le_bytes());
    v.extend_from_slice(&(rate * block as u32).to_le_bytes());
    v.extend_from_slice(&block.to_le_bytes());
    v.extend_from_slice(&bits.to_le_bytes());
    v.extend_from_slice(b"data");
    v.extend_from_slice(&(data.len() as u32).to_le_bytes());
    v.extend_from_slice(data);
    v
}

#[test]
fn float32_round_trips_at_single_precision() {
    let samples: Vec<f64> = (0..257).map(|i| ((i as f64) * 0.37).sin() * 0.9).collect();
    let w = parse_wav(&encode_wav(&samples, 16_000, Encoding::Float32)).unwrap();
    assert_eq!(w.sample_rate(), 16_000);
    assert_eq!(w.len(), samples.len());
    for (a, b) in w.samples().iter().zip(&samples) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn pcm16_round_trips_within_one_step() {
    let samples: Vec<f64> = (0..100).map(|i| (i as f64 / 50.0) - 1.0).collect();
    let w = parse_wav(&encode_wav(&samples, 8_000, Encoding::Pcm16)).unwrap();
    for (a, b) in w.samples().iter().zip(&samples) {
        assert!((a - b).abs() <= 1.0 / 32768.0, "{a} vs {b}");
    }
}

#[test]
fn stereo_is_averaged() {
    let mut data = Vec::new();
    for (l, r) in [(16384i16, 0i16), (-32768, 32767), (100, 300)] {
        data.extend_from_slice(&l.to_le_bytes());
        data.extend_from_slice(&r.to_le_bytes());
    }
    let w = parse_wav(&header(1, 2, 16_000, 16, &data)).unwrap();
    assert_eq!(w.samples(), &[0.25, -0.5 / 32768.0, 200.0 / 32768.0]);
}

#[test]
fn unsupported_encodings_name_the_chunk() {
    for (tag, bits) in [(1u16, 24u16), (1, 8), (3, 64), (6, 8)] {
        let err = parse_wav(&header(tag, 1, 16_000, bits, &[0; 24])).unwrap_err();
        match &err {
            WavError::Chunk { chunk, .. } => assert_eq!(chunk, "fmt "),
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("'fmt '"), "{err}");
    }
    let err = parse_wav(&header(1, 3, 16_000, 16, &[0; 12])).unwrap_err();
    assert!(err.to_string().contains("3 channels"), "{err}");
}

#[test]
fn malformed_files_are_rejected() {
    assert!(matches!(parse_wav(b"RIFX0000WAVE"), Err(WavError::NotWave)));
    let mut no_data = header(1, 1, 16_000, 16, &[]);
    no_data.truncate(36);
    assert!(matches!(parse_wav(&no_data), Err(WavError::MissingChunk("data"))));
}

#[test]
fn unknown_chunks_are_skipped() {
    let plain = encode_wav(&[0.5, -0.25], 16_000, Encoding::Float32);
    let mut v = plain[..12].to_vec();
    v.extend_from_slice(b"LIST");
    v.extend_from_slice(&3u32.to_le_bytes());
    v.extend_from_slice(&[1, 2, 3, 0]);
    v.extend_from_slice(&plain[12..]);
    assert_eq!(parse_wav(&v).unwrap().samples(), &[0.5, -0.25]);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    write_wav(&path, &[0.0, 0.5, -0.5], 22_050, Encoding::Float32).unwrap();
    let w = read_wav(&path).unwrap();
    assert_eq!(w.samples(), &[0.0, 0.5, -0.5]);
    assert!(read_wav(&dir.path().join("missing.wav")).is_err());
}
