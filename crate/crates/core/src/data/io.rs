//! On-disk formats: per-channel CSV, flat binary with a JSON sidecar, and
//! conversion from `.npz` / `.npy` archives.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teddn_autograd::{Float, Tensor};

use super::TrafficSeries;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Flatbin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub dtype: String,
    pub steps_per_day: usize,
    pub start_weekday: usize,
}

pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Loads `paths` in the given format. CSV takes one file per channel;
/// flatbin takes the single payload file.
pub fn load(
    format: DataFormat,
    paths: &[PathBuf],
    steps_per_day: Option<usize>,
    start_weekday: Option<usize>,
) -> Result<TrafficSeries> {
    match format {
        DataFormat::Csv => load_csv(paths, steps_per_day.unwrap_or(288), start_weekday.unwrap_or(0)),
        DataFormat::Flatbin => {
            let [path] = paths else {
                return Err(Error::Config(format!(
                    "flatbin datasets take exactly one path, got {}",
                    paths.len()
                )));
            };
            let mut s = load_flatbin(path)?;
            if let Some(spd) = steps_per_day {
                s.steps_per_day = spd;
            }
            if let Some(w) = start_weekday {
                s.start_weekday = w % 7;
            }
            Ok(s)
        }
    }
}

fn parse_csv(path: &Path) -> Result<(usize, Vec<Float>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut width = None;
    let mut data = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && cells.iter().all(|c| c.parse::<Float>().is_err()) {
            continue;
        }
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Format(format!(
                    "{}: row {} has {} columns, expected {w}",
                    path.display(),
                    lineno + 1,
                    cells.len()
                )))
            }
            _ => {}
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: Float = cell.parse().map_err(|_| {
                Error::Format(format!(
                    "{}: cannot parse {cell:?} at row {}, column {}",
                    path.display(),
                    lineno + 1,
                    col + 1
                ))
            })?;
            data.push(v);
        }
    }
    let width = width.ok_or_else(|| Error::Format(format!("{}: no data rows", path.display())))?;
    Ok((width, data))
}

/// One CSV per channel, each `T` rows of `N` comma-separated values, with an
/// optional header row (a first row in which no cell is numeric).
pub fn load_csv(paths: &[PathBuf], steps_per_day: usize, start_weekday: usize) -> Result<TrafficSeries> {
    if paths.is_empty() {
        return Err(Error::Config("csv dataset needs at least one file".into()));
    }
    let mut channels = Vec::with_capacity(paths.len());
    for p in paths {
        channels.push(parse_csv(p)?);
    }
    let (n, first) = (&channels[0].0, &channels[0].1);
    let t = first.len() / n;
    for (p, (w, d)) in paths.iter().zip(&channels) {
        if w != n || d.len() != first.len() {
            return Err(Error::Format(format!(
                "{}: shape {}x{w} differs from first channel {t}x{n}",
                p.display(),
                d.len() / w
            )));
        }
    }
    let c = channels.len();
    let n = *n;
    let values = Tensor::from_fn([t, n, c], |i| {
        let ch = i % c;
        channels[ch].1[i / c]
    });
    TrafficSeries::new(values, steps_per_day, start_weekday)
}

/// Writes channel `ch` of `series` as a headerless CSV.
pub fn write_csv(path: &Path, series: &TrafficSeries, ch: usize) -> Result<()> {
    let (n, c) = (series.num_nodes(), series.channels());
    let mut out = String::new();
    for row in series.values.data().chunks(n * c) {
        let cells: Vec<String> = (0..n).map(|i| row[i * c + ch].to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(bin: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(bin);
    let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", sp.display())))
}

/// Raw little-endian row-major `(T, N, C)` payload next to its sidecar.
pub fn load_flatbin(path: &Path) -> Result<TrafficSeries> {
    let sc = read_sidecar(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = match sc.dtype.as_str() {
        "f32" | "float32" => 4,
        "f64" | "float64" => 8,
        other => return Err(Error::Format(format!("unsupported dtype {other:?} in sidecar"))),
    };
    let expected = sc.t * sc.n * sc.c;
    if bytes.len() % width != 0 || bytes.len() / width != expected {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes ({} elements of {width} bytes) but sidecar declares {expected} elements",
            path.display(),
            bytes.len(),
            bytes.len() as f64 / width as f64
        )));
    }
    let data: Vec<Float> = if width == 4 {
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as Float)
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as Float)
            .collect()
    };
    TrafficSeries::new(Tensor::new([sc.t, sc.n, sc.c], data)?, sc.steps_per_day, sc.start_weekday)
}

/// Writes `<path>` (f64 payload) and its sidecar.
pub fn write_flatbin(path: &Path, series: &TrafficSeries) -> Result<Sidecar> {
    let mut payload = Vec::with_capacity(series.values.numel() * 8);
    for &v in series.values.data() {
        payload.extend_from_slice(&(v as f64).to_le_bytes());
    }
    std::fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let sc = Sidecar {
        t: series.len(),
        n: series.num_nodes(),
        c: series.channels(),
        dtype: "f64".into(),
        steps_per_day: series.steps_per_day,
        start_weekday: series.start_weekday,
    };
    let sp = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sc).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))?;
    Ok(sc)
}

#[derive(Clone, Debug)]
pub struct ConvertOptions {
    /// Array inside an `.npz`; the `data` array (or the only array) when unset.
    pub array: Option<String>,
    /// Channels to keep; all when empty.
    pub channels: Vec<usize>,
    pub steps_per_day: usize,
    pub start_weekday: usize,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            array: None,
            channels: Vec::new(),
            steps_per_day: 288,
            start_weekday: 0,
        }
    }
}

fn read_npy<R: Read>(npy: npyz::NpyFile<R>, origin: &str) -> Result<(Vec<usize>, Vec<Float>)> {
    use npyz::{DType, TypeChar};
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    if npy.order() != npyz::Order::C {
        return Err(Error::Format(format!("{origin}: Fortran-ordered arrays are not supported")));
    }
    let DType::Plain(ts) = npy.dtype() else {
        return Err(Error::Format(format!("{origin}: structured dtypes are not supported")));
    };
    let bad = |e: std::io::Error| Error::Format(format!("{origin}: {e}"));
    let data: Vec<Float> = match (ts.type_char(), ts.size_field()) {
        (TypeChar::Float, 8) => npy.into_vec::<f64>().map_err(bad)?.into_iter().map(|v| v as Float).collect(),
        (TypeChar::Float, 4) => npy.into_vec::<f32>().map_err(bad)?.into_iter().map(|v| v as Float).collect(),
        (TypeChar::Int, 8) => npy.into_vec::<i64>().map_err(bad)?.into_iter().map(|v| v as Float).collect(),
        (TypeChar::Int, 4) => npy.into_vec::<i32>().map_err(bad)?.into_iter().map(|v| v as Float).collect(),
        (TypeChar::Uint, 8) => npy.into_vec::<u64>().map_err(bad)?.into_iter().map(|v| v as Float).collect(),
        (TypeChar::Uint, 4) => npy.into_vec::<u32>().map_err(bad)?.into_iter().map(|v| v as Float).collect(),
        _ => return Err(Error::Format(format!("{origin}: unsupported dtype {ts}"))),
    };
    let expected: usize = shape.iter().product();
    if data.len() != expected {
        return Err(Error::Format(format!(
            "{origin}: payload has {} elements, header shape {shape:?} needs {expected}",
            data.len()
        )));
    }
    Ok((shape, data))
}

fn read_npz<R: Read + Seek>(reader: R, origin: &str, array: Option<&str>) -> Result<(Vec<usize>, Vec<Float>)> {
    let bad = |e: std::io::Error| Error::Format(format!("{origin}: {e}"));
    let mut npz = npyz::npz::NpzArchive::new(reader).map_err(bad)?;
    let names: Vec<String> = npz.array_names().map(str::to_string).collect();
    let name = match array {
        Some(a) => a.to_string(),
        None if names.iter().any(|n| n == "data") => "data".into(),
        None if names.len() == 1 => names[0].clone(),
        None => {
            return Err(Error::Format(format!(
                "{origin}: cannot pick an array from {names:?}; pass one explicitly"
            )))
        }
    };
    let npy = npz
        .by_name(&name)
        .map_err(bad)?
        .ok_or_else(|| Error::Format(format!("{origin}: no array named {name:?} (have {names:?})")))?;
    read_npy(npy, &format!("{origin}[{name}]"))
}

/// Reads a `(T, N)` or `(T, N, C)` array from an `.npz` or `.npy` archive,
/// keeps the selected channels and writes `<out_dir>/<stem>.bin` plus its
/// sidecar.
pub fn convert_archive(input: &Path, out_dir: &Path, opts: &ConvertOptions) -> Result<(PathBuf, Sidecar)> {
    let origin = input.display().to_string();
    let f = File::open(input).map_err(|e| Error::io(input, e))?;
    let is_npy = input.extension().and_then(|e| e.to_str()) == Some("npy");
    let (shape, data) = if is_npy {
        let npy = npyz::NpyFile::new(BufReader::new(f)).map_err(|e| Error::Format(format!("{origin}: {e}")))?;
        read_npy(npy, &origin)?
    } else {
        read_npz(BufReader::new(f), &origin, opts.array.as_deref())?
    };
    let (t, n, c) = match shape[..] {
        [t, n] => (t, n, 1),
        [t, n, c] => (t, n, c),
        _ => return Err(Error::Format(format!("{origin}: expected a (T, N[, C]) array, got {shape:?}"))),
    };
    let keep: Vec<usize> = if opts.channels.is_empty() {
        (0..c).collect()
    } else {
        opts.channels.clone()
    };
    if let Some(&bad) = keep.iter().find(|&&k| k >= c) {
        return Err(Error::Config(format!("channel {bad} out of range; archive has {c}")));
    }
    let kc = keep.len();
    let values = Tensor::from_fn([t, n, kc], |i| {
        let row = i / kc;
        data[row * c + keep[i % kc]]
    });
    let series = TrafficSeries::new(values, opts.steps_per_day, opts.start_weekday)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let out = out_dir.join(format!("{stem}.bin"));
    let sc = write_flatbin(&out, &series)?;
    Ok((out, sc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use npyz::WriterBuilder;

    #[test]
    fn csv_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("flow.csv");
        std::fs::write(&p, "a,b\n1,2\n3.5,4\n-5,6e1\n").unwrap();
        let s = load_csv(std::slice::from_ref(&p), 288, 0).unwrap();
        assert_eq!(s.values.shape(), &[3, 2, 1]);
        assert_eq!(s.values.data(), &[1.0, 2.0, 3.5, 4.0, -5.0, 60.0]);

        let q = dir.path().join("again.csv");
        write_csv(&q, &s, 0).unwrap();
        assert_eq!(load_csv(&[q], 288, 0).unwrap().values, s.values);
    }

    #[test]
    fn csv_errors_name_the_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        let err = load_csv(std::slice::from_ref(&p), 288, 0).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(load_csv(&[p], 288, 0), Err(Error::Format(_))));
    }

    #[test]
    fn multi_channel_csv_interleaves() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "1,2\n3,4\n").unwrap();
        std::fs::write(&b, "10,20\n30,40\n").unwrap();
        let s = load_csv(&[a, b], 288, 0).unwrap();
        assert_eq!(s.values.shape(), &[2, 2, 2]);
        assert_eq!(s.values.data(), &[1., 10., 2., 20., 3., 30., 4., 40.]);
    }

    #[test]
    fn flatbin_round_trip_and_size_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let s = TrafficSeries::new(Tensor::from_fn([4, 3, 2], |i| i as Float * 0.5), 12, 3).unwrap();
        write_flatbin(&p, &s).unwrap();
        let back = load_flatbin(&p).unwrap();
        assert_eq!(back, s);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, bytes).unwrap();
        let err = load_flatbin(&p).unwrap_err().to_string();
        assert!(err.contains("23") && err.contains("24"), "{err}");
    }

    fn write_npz(path: &Path, shape: &[u64], data: &[f32]) {
        let mut w = npyz::npz::NpzWriter::create(path).unwrap();
        let mut a = w
            .array::<f32>("data", Default::default())
            .unwrap()
            .default_dtype()
            .shape(shape)
            .begin_nd()
            .unwrap();
        a.extend(data.iter().copied()).unwrap();
        a.finish().unwrap();
    }

    #[test]
    fn convert_npz_selects_channels_and_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let npz = dir.path().join("toy.npz");
        let data: Vec<f32> = (0..5 * 2 * 3).map(|i| i as f32).collect();
        write_npz(&npz, &[5, 2, 3], &data);
        let opts = ConvertOptions {
            channels: vec![0],
            ..Default::default()
        };
        let out = dir.path().join("out");
        let (bin, sc) = convert_archive(&npz, &out, &opts).unwrap();
        assert_eq!((sc.t, sc.n, sc.c), (5, 2, 1));
        let first = std::fs::read(&bin).unwrap();
        convert_archive(&npz, &out, &opts).unwrap();
        assert_eq!(std::fs::read(&bin).unwrap(), first);
        let s = load_flatbin(&bin).unwrap();
        assert_eq!(&s.values.data()[..4], &[0.0, 3.0, 6.0, 9.0]);

        let bad = ConvertOptions {
            channels: vec![3],
            ..Default::default()
        };
        assert!(convert_archive(&npz, &out, &bad).is_err());
    }

    #[test]
    fn corrupted_archive_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let npz = dir.path().join("toy.npz");
        std::fs::write(&npz, b"PK\x03\x04 definitely not a zip").unwrap();
        let err = convert_archive(&npz, dir.path(), &ConvertOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }
}
