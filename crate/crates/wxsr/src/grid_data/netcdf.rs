//! NetCDF ingestion and export following the WeatherBench layout:
//! dimensions `time`/`lat`/`lon`, a data variable (default `t2m`), and a
//! `time` coordinate carrying an `hours since <datetime>` unit attribute.
//!
//! Files are classic NetCDF (CDF-1); a path may name one file or a directory
//! of `.nc` files that are read in name order.

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, TimeZone, Utc};
use ndarray::Array2;
use netcdf3::{DataSet, DataVector, FileReader, FileWriter, Version};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{GridField, PairedDataset, PairedSample, Split, Units, HR_SHAPE, LR_SHAPE};
use crate::error::{Result, WxError};

/// Default WeatherBench variable name.
pub const DEFAULT_VARIABLE: &str = "t2m";

fn nc_read_err(path: &Path, e: impl std::fmt::Display) -> WxError {
    WxError::NetcdfRead(format!("{}: {e}", path.display()))
}

fn data_vector_to_f64(dv: DataVector) -> Vec<f64> {
    match dv {
        DataVector::I8(v) => v.into_iter().map(|x| x as f64).collect(),
        DataVector::U8(v) => v.into_iter().map(|x| x as f64).collect(),
        DataVector::I16(v) => v.into_iter().map(|x| x as f64).collect(),
        DataVector::I32(v) => v.into_iter().map(|x| x as f64).collect(),
        DataVector::F32(v) => v.into_iter().map(|x| x as f64).collect(),
        DataVector::F64(v) => v,
    }
}

/// Parse `"hours since 1979-01-01"` / `"hours since 1979-01-01 00:00:00"`.
fn parse_time_units(units: &str) -> Result<DateTime<Utc>> {
    let rest = units
        .trim()
        .strip_prefix("hours since ")
        .ok_or_else(|| WxError::Data(format!("unsupported time units: {units:?}")))?;
    let rest = rest.trim();
    let naive = NaiveDateTime::parse_from_str(rest, "%Y-%m-%d %H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(rest, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| {
            NaiveDate::parse_from_str(rest, "%Y-%m-%d").map(|d| d.and_hms_opt(0, 0, 0).unwrap())
        })
        .map_err(|e| WxError::Data(format!("cannot parse time epoch {rest:?}: {e}")))?;
    Ok(Utc.from_utc_datetime(&naive))
}

/// One archive file decoded into timestamped fields.
struct ArchiveFile {
    timestamps: Vec<DateTime<Utc>>,
    fields: Vec<Array2<f64>>,
    spacing_deg: f64,
}

fn read_archive_file(path: &Path, variable: &str) -> Result<ArchiveFile> {
    let mut reader = FileReader::open(path).map_err(|e| nc_read_err(path, e))?;
    let ds = reader.data_set();
    let var = ds
        .get_var(variable)
        .ok_or_else(|| WxError::Config(format!("variable {variable:?} missing in {}", path.display())))?;
    let dims: Vec<String> = var.dim_names();
    if dims.len() != 3 || dims[0] != "time" || dims[1] != "lat" || dims[2] != "lon" {
        return Err(WxError::Data(format!(
            "{}: variable {variable:?} must have dimensions (time, lat, lon), got {dims:?}",
            path.display()
        )));
    }
    let nt = ds.dim_size("time").unwrap_or(0);
    let nlat = ds.dim_size("lat").unwrap_or(0);
    let nlon = ds.dim_size("lon").unwrap_or(0);
    let time_units = ds
        .get_var("time")
        .and_then(|v| v.get_attr_as_string("units"))
        .ok_or_else(|| WxError::Data(format!("{}: time variable lacks units", path.display())))?;
    let epoch = parse_time_units(&time_units)?;

    let lat = data_vector_to_f64(reader.read_var("lat").map_err(|e| nc_read_err(path, e))?);
    let spacing_deg = if lat.len() >= 2 {
        (lat[1] - lat[0]).abs()
    } else {
        return Err(WxError::Data(format!("{}: lat axis too short", path.display())));
    };
    let hours = data_vector_to_f64(reader.read_var("time").map_err(|e| nc_read_err(path, e))?);
    let raw = data_vector_to_f64(reader.read_var(variable).map_err(|e| nc_read_err(path, e))?);
    if raw.len() != nt * nlat * nlon {
        return Err(WxError::Data(format!(
            "{}: variable length {} does not match time*lat*lon = {}",
            path.display(),
            raw.len(),
            nt * nlat * nlon
        )));
    }

    let mut timestamps = Vec::with_capacity(nt);
    let mut fields = Vec::with_capacity(nt);
    for (k, h) in hours.iter().enumerate() {
        let ts = epoch + Duration::hours(h.round() as i64);
        let slice = &raw[k * nlat * nlon..(k + 1) * nlat * nlon];
        let arr = Array2::from_shape_vec((nlat, nlon), slice.to_vec())
            .map_err(|e| WxError::Data(format!("{}: {e}", path.display())))?;
        timestamps.push(ts);
        fields.push(arr);
    }
    Ok(ArchiveFile {
        timestamps,
        fields,
        spacing_deg,
    })
}

fn archive_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "nc"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(WxError::Data(format!(
                "no .nc files in directory {}",
                path.display()
            )));
        }
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Read an archive (file or directory of files) into a timestamp-keyed map.
fn read_archive(
    path: &Path,
    variable: &str,
    expected_shape: (usize, usize),
) -> Result<(BTreeMap<DateTime<Utc>, Array2<f64>>, f64)> {
    let paths = archive_paths(path)?;
    let decoded: Vec<(PathBuf, Result<ArchiveFile>)> = paths
        .par_iter()
        .map(|p| (p.clone(), read_archive_file(p, variable)))
        .collect();
    let mut map = BTreeMap::new();
    let mut spacing = None;
    for (p, res) in decoded {
        let file = res?;
        for (ts, arr) in file.timestamps.into_iter().zip(file.fields) {
            if arr.dim() != expected_shape {
                return Err(WxError::Data(format!(
                    "{}: field shape {:?} does not match expected {:?}",
                    p.display(),
                    arr.dim(),
                    expected_shape
                )));
            }
            map.insert(ts, arr);
        }
        spacing.get_or_insert(file.spacing_deg);
    }
    Ok((map, spacing.unwrap_or(0.0)))
}

/// Enumerate the hourly candidate timestamps in `[date_start, date_end)`,
/// optionally restricted to one month (1-12).
pub fn candidate_hours(
    date_start: DateTime<Utc>,
    date_end: DateTime<Utc>,
    month_filter: Option<u32>,
) -> Vec<DateTime<Utc>> {
    let mut out = Vec::new();
    let mut t = date_start;
    while t < date_end {
        if month_filter.is_none_or(|m| t.month() == m) {
            out.push(t);
        }
        t += Duration::hours(1);
    }
    out
}

/// Load hourly LR/HR pairs from two WeatherBench-layout archives.
///
/// Timestamps are restricted to the half-open window `[date_start, date_end)`
/// and to `month_filter` when given. Hours present in only one archive are
/// dropped and counted in `PairedDataset::dropped`.
pub fn load_pairs(
    lr_path: &Path,
    hr_path: &Path,
    variable: &str,
    date_start: DateTime<Utc>,
    date_end: DateTime<Utc>,
    month_filter: Option<u32>,
    split: Split,
) -> Result<PairedDataset> {
    if date_start >= date_end {
        return Err(WxError::Config(
            "date_start must precede date_end".into(),
        ));
    }
    let (lr_map, lr_spacing) = read_archive(lr_path, variable, LR_SHAPE)?;
    let (hr_map, hr_spacing) = read_archive(hr_path, variable, HR_SHAPE)?;

    let in_window = |ts: &DateTime<Utc>| {
        *ts >= date_start && *ts < date_end && month_filter.is_none_or(|m| ts.month() == m)
    };
    let mut candidates: Vec<DateTime<Utc>> = lr_map
        .keys()
        .chain(hr_map.keys())
        .filter(|ts| in_window(ts))
        .copied()
        .collect();
    candidates.sort();
    candidates.dedup();

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for ts in &candidates {
        match (lr_map.get(ts), hr_map.get(ts)) {
            (Some(lr), Some(hr)) => {
                let lr = GridField::new(lr.clone(), Units::Kelvin, lr_spacing)?.with_timestamp(*ts);
                let hr = GridField::new(hr.clone(), Units::Kelvin, hr_spacing)?.with_timestamp(*ts);
                samples.push(PairedSample::new(lr, hr, *ts)?);
            }
            _ => dropped += 1,
        }
    }
    if samples.is_empty() {
        return Err(WxError::EmptyDataset(format!(
            "no paired samples in [{date_start}, {date_end}) (dropped {dropped})"
        )));
    }
    let mut ds = PairedDataset::from_samples(samples, split)?;
    ds.dropped = dropped;
    Ok(ds)
}

/// Write one archive of timestamped fields (used by exports and tests).
pub fn write_archive(
    path: &Path,
    variable: &str,
    fields: &[(DateTime<Utc>, Array2<f64>)],
    spacing_deg: f64,
    units: &str,
) -> Result<()> {
    if fields.is_empty() {
        return Err(WxError::NetcdfWrite("no fields to write".into()));
    }
    let (nlat, nlon) = fields[0].1.dim();
    let epoch = fields[0].0;
    let mut ds = DataSet::new();
    let werr = |e: netcdf3::error::InvalidDataSet| WxError::NetcdfWrite(e.to_string());
    ds.add_fixed_dim("time", fields.len()).map_err(werr)?;
    ds.add_fixed_dim("lat", nlat).map_err(werr)?;
    ds.add_fixed_dim("lon", nlon).map_err(werr)?;
    ds.add_var_f64("time", &["time"]).map_err(werr)?;
    ds.add_var_attr_string(
        "time",
        "units",
        format!("hours since {}", epoch.format("%Y-%m-%d %H:%M:%S")),
    )
    .map_err(werr)?;
    ds.add_var_f64("lat", &["lat"]).map_err(werr)?;
    ds.add_var_f64("lon", &["lon"]).map_err(werr)?;
    ds.add_var_f32(variable, &["time", "lat", "lon"]).map_err(werr)?;
    ds.add_var_attr_string(variable, "units", units).map_err(werr)?;

    let hours: Vec<f64> = fields
        .iter()
        .map(|(ts, _)| (*ts - epoch).num_hours() as f64)
        .collect();
    // Grid registered on cell centers from the north pole downward, matching
    // the WeatherBench convention of equally spaced lat/lon.
    let lat: Vec<f64> = (0..nlat)
        .map(|i| 90.0 - spacing_deg / 2.0 - i as f64 * spacing_deg)
        .collect();
    let lon: Vec<f64> = (0..nlon).map(|j| j as f64 * spacing_deg).collect();
    let mut values = Vec::with_capacity(fields.len() * nlat * nlon);
    for (_, arr) in fields {
        if arr.dim() != (nlat, nlon) {
            return Err(WxError::NetcdfWrite(
                "all fields in an archive must share one shape".into(),
            ));
        }
        values.extend(arr.iter().map(|&v| v as f32));
    }

    let mut writer =
        FileWriter::create_new(path).map_err(|e| WxError::NetcdfWrite(format!("{e:?}")))?;
    let werr2 = |e: netcdf3::error::WriteError| WxError::NetcdfWrite(format!("{e:?}"));
    writer.set_def(&ds, Version::Classic, 0).map_err(werr2)?;
    writer.write_var_f64("time", &hours).map_err(werr2)?;
    writer.write_var_f64("lat", &lat).map_err(werr2)?;
    writer.write_var_f64("lon", &lon).map_err(werr2)?;
    writer.write_var_f32(variable, &values).map_err(werr2)?;
    writer.close().map_err(werr2)?;
    Ok(())
}

/// Export a single field as one-timestep archive.
pub fn write_field(path: &Path, variable: &str, field: &GridField, units: &str) -> Result<()> {
    let ts = field
        .timestamp
        .unwrap_or_else(|| Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap());
    write_archive(
        path,
        variable,
        &[(ts, field.values.clone())],
        field.grid_spacing_deg,
        units,
    )
}

/// Read back a single-timestep exported field.
pub fn read_field(path: &Path, variable: &str) -> Result<GridField> {
    let file = read_archive_file(path, variable)?;
    let arr = file
        .fields
        .into_iter()
        .next()
        .ok_or_else(|| WxError::Data(format!("{}: empty archive", path.display())))?;
    let ts = file.timestamps[0];
    Ok(GridField::new(arr, Units::Kelvin, file.spacing_deg)?.with_timestamp(ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_data::{synth_pair, HR_SPACING_DEG, LR_SPACING_DEG};

    fn utc(y: i32, mo: u32, d: u32, h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, mo, d, h, 0, 0).unwrap()
    }

    #[test]
    fn candidate_hours_matches_paper_training_window() {
        // 37 Januaries x 31 days x 24 hours
        let n = candidate_hours(utc(1979, 1, 1, 0), utc(2015, 2, 1, 0), Some(1)).len();
        assert_eq!(n, 27_528);
        assert_eq!(n, 37 * 31 * 24);
    }

    #[test]
    fn candidate_hours_matches_paper_validation_window() {
        let n = candidate_hours(utc(2016, 1, 1, 0), utc(2016, 2, 1, 0), Some(1)).len();
        assert_eq!(n, 744);
        assert_eq!(n, 31 * 24);
    }

    #[test]
    fn candidate_hours_half_open_window_excludes_end() {
        let hours = candidate_hours(utc(2016, 1, 31, 22), utc(2016, 2, 1, 0), Some(1));
        assert_eq!(hours.len(), 2);
        assert_eq!(*hours.last().unwrap(), utc(2016, 1, 31, 23));
    }

    fn write_pair_archives(
        dir: &Path,
        timestamps_lr: &[DateTime<Utc>],
        timestamps_hr: &[DateTime<Utc>],
    ) -> (PathBuf, PathBuf) {
        let base = synth_pair(0, 6.0).unwrap();
        let lr_fields: Vec<_> = timestamps_lr
            .iter()
            .map(|&ts| (ts, base.lr.values.mapv(|v| 270.0 + 8.0 * v)))
            .collect();
        let hr_fields: Vec<_> = timestamps_hr
            .iter()
            .map(|&ts| (ts, base.hr.values.mapv(|v| 270.0 + 8.0 * v)))
            .collect();
        let lr_path = dir.join("lr.nc");
        let hr_path = dir.join("hr.nc");
        write_archive(&lr_path, "t2m", &lr_fields, LR_SPACING_DEG, "K").unwrap();
        write_archive(&hr_path, "t2m", &hr_fields, HR_SPACING_DEG, "K").unwrap();
        (lr_path, hr_path)
    }

    #[test]
    fn load_pairs_pairs_by_timestamp_and_counts_drops() {
        let dir = tempfile::tempdir().unwrap();
        let common: Vec<_> = (0..5).map(|h| utc(2016, 1, 1, h)).collect();
        let mut lr_ts = common.clone();
        lr_ts.push(utc(2016, 1, 1, 7)); // missing on HR side
        let mut hr_ts = common.clone();
        hr_ts.push(utc(2016, 1, 1, 9)); // missing on LR side
        let (lr_path, hr_path) = write_pair_archives(dir.path(), &lr_ts, &hr_ts);

        let ds = load_pairs(
            &lr_path,
            &hr_path,
            "t2m",
            utc(2016, 1, 1, 0),
            utc(2016, 2, 1, 0),
            Some(1),
            Split::Validation,
        )
        .unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.dropped, 2);
        // pairing totality: returned + dropped = candidates present in either archive
        assert_eq!(ds.len() + ds.dropped, 7);
        assert_eq!(ds.samples[0].lr.shape(), LR_SHAPE);
        assert_eq!(ds.samples[0].hr.shape(), HR_SHAPE);
        assert_eq!(ds.samples[0].lr.units, Units::Kelvin);
    }

    #[test]
    fn load_pairs_applies_month_filter_and_window() {
        let dir = tempfile::tempdir().unwrap();
        let ts = vec![
            utc(2015, 12, 31, 23), // wrong month
            utc(2016, 1, 1, 0),
            utc(2016, 1, 1, 1),
            utc(2016, 2, 1, 0), // outside half-open window
        ];
        let (lr_path, hr_path) = write_pair_archives(dir.path(), &ts, &ts);
        let ds = load_pairs(
            &lr_path,
            &hr_path,
            "t2m",
            utc(2016, 1, 1, 0),
            utc(2016, 2, 1, 0),
            Some(1),
            Split::Validation,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dropped, 0);
    }

    #[test]
    fn load_pairs_missing_variable_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let ts = vec![utc(2016, 1, 1, 0)];
        let (lr_path, hr_path) = write_pair_archives(dir.path(), &ts, &ts);
        let err = load_pairs(
            &lr_path,
            &hr_path,
            "z500",
            utc(2016, 1, 1, 0),
            utc(2016, 2, 1, 0),
            None,
            Split::Validation,
        )
        .unwrap_err();
        assert!(matches!(err, WxError::Config(_)), "got {err:?}");
    }

    #[test]
    fn load_pairs_wrong_shape_names_offending_file() {
        let dir = tempfile::tempdir().unwrap();
        let ts = utc(2016, 1, 1, 0);
        let bad = Array2::<f64>::zeros((16, 16));
        let lr_path = dir.path().join("lr.nc");
        let hr_path = dir.path().join("hr.nc");
        write_archive(&lr_path, "t2m", &[(ts, bad.clone())], LR_SPACING_DEG, "K").unwrap();
        write_archive(&hr_path, "t2m", &[(ts, bad)], HR_SPACING_DEG, "K").unwrap();
        let err = load_pairs(
            &lr_path,
            &hr_path,
            "t2m",
            utc(2016, 1, 1, 0),
            utc(2016, 2, 1, 0),
            None,
            Split::Validation,
        )
        .unwrap_err();
        match err {
            WxError::Data(msg) => assert!(msg.contains("lr.nc"), "message should name file: {msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn load_pairs_empty_window_is_empty_dataset_error() {
        let dir = tempfile::tempdir().unwrap();
        let ts = vec![utc(2016, 1, 1, 0)];
        let (lr_path, hr_path) = write_pair_archives(dir.path(), &ts, &ts);
        let err = load_pairs(
            &lr_path,
            &hr_path,
            "t2m",
            utc(2017, 1, 1, 0),
            utc(2017, 2, 1, 0),
            Some(1),
            Split::Validation,
        )
        .unwrap_err();
        assert!(matches!(err, WxError::EmptyDataset(_)), "got {err:?}");
    }

    #[test]
    fn field_export_round_trips_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = synth_pair(11, 6.0).unwrap();
        let mut hr = p.hr.clone();
        hr.values.mapv_inplace(|v| 280.0 + 9.0 * v);
        hr.units = Units::Kelvin;
        let path = dir.path().join("field.nc");
        write_field(&path, "t2m", &hr, "K").unwrap();
        let back = read_field(&path, "t2m").unwrap();
        assert_eq!(back.shape(), hr.shape());
        for (a, b) in hr.values.iter().zip(back.values.iter()) {
            assert!((*a as f32 - *b as f32).abs() <= f32::EPSILON * a.abs() as f32);
        }
    }

    #[test]
    fn directory_archives_are_merged() {
        let dir = tempfile::tempdir().unwrap();
        let lr_dir = dir.path().join("lr");
        let hr_dir = dir.path().join("hr");
        std::fs::create_dir_all(&lr_dir).unwrap();
        std::fs::create_dir_all(&hr_dir).unwrap();
        let base = synth_pair(0, 6.0).unwrap();
        for (name, h0) in [("a.nc", 0u32), ("b.nc", 2u32)] {
            let ts: Vec<_> = (h0..h0 + 2).map(|h| utc(2016, 1, 1, h)).collect();
            let lr_fields: Vec<_> = ts
                .iter()
                .map(|&t| (t, base.lr.values.mapv(|v| 270.0 + v)))
                .collect();
            let hr_fields: Vec<_> = ts
                .iter()
                .map(|&t| (t, base.hr.values.mapv(|v| 270.0 + v)))
                .collect();
            write_archive(&lr_dir.join(name), "t2m", &lr_fields, LR_SPACING_DEG, "K").unwrap();
            write_archive(&hr_dir.join(name), "t2m", &hr_fields, HR_SPACING_DEG, "K").unwrap();
        }
        let ds = load_pairs(
            &lr_dir,
            &hr_dir,
            "t2m",
            utc(2016, 1, 1, 0),
            utc(2016, 2, 1, 0),
            Some(1),
            Split::Train,
        )
        .unwrap();
        assert_eq!(ds.len(), 4);
    }
}
