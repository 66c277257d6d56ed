//! FER2013 CSV: header `emotion,pixels,Usage`, one face per row.

use std::io::{Read, Write};
use std::path::Path;

use super::{class_names, Dataset, Sample, Split, CLASS_NAMES, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FER_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

/// FER2013 rows grouped by their `Usage` column.
#[derive(Clone, Debug, PartialEq)]
pub struct FerSplits {
    /// `Training` rows.
    pub train: Dataset,
    /// `PublicTest` rows.
    pub val: Dataset,
    /// `PrivateTest` rows.
    pub test: Dataset,
}

impl FerSplits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn csv_err(line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        line,
        message: message.into(),
    }
}

pub fn parse_fer_csv(reader: impl Read) -> Result<FerSplits> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| csv_err(1, "missing header"))?
        .map_err(|e| csv_err(1, e.to_string()))?;
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != ["emotion", "pixels", "Usage"] {
        return Err(csv_err(1, format!("expected header emotion,pixels,Usage, got {}", names.join(","))));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 3 {
            return Err(csv_err(line, format!("expected 3 columns, got {}", rec.len())));
        }
        let emotion: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(line, format!("invalid emotion '{}'", &rec[0])))?;
        if emotion >= CLASS_NAMES.len() {
            return Err(csv_err(line, format!("emotion {emotion} outside 0-6")));
        }
        let mut pixels = Vec::with_capacity(FER_PIXELS);
        for tok in rec[1].split_ascii_whitespace() {
            let v: u16 = tok
                .parse()
                .map_err(|_| csv_err(line, format!("invalid pixel '{tok}'")))?;
            if v > 255 {
                return Err(csv_err(line, format!("pixel {v} outside 0-255")));
            }
            pixels.push(v as f32 / 255.0);
        }
        if pixels.len() != FER_PIXELS {
            return Err(csv_err(line, format!("expected {FER_PIXELS} pixels, got {}", pixels.len())));
        }
        let image = Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], pixels)?;
        let sample = Sample::new(image, emotion, CLASS_NAMES.len()).map_err(|e| csv_err(line, e.to_string()))?;
        match rec[2].trim() {
            "Training" => train.push(sample),
            "PublicTest" => val.push(sample),
            "PrivateTest" => test.push(sample),
            other => return Err(csv_err(line, format!("unknown Usage '{other}'"))),
        }
    }
    Ok(FerSplits {
        train: Dataset::new(train, class_names(), Split::Train)?,
        val: Dataset::new(val, class_names(), Split::Val)?,
        test: Dataset::new(test, class_names(), Split::Test)?,
    })
}

pub fn read_fer_csv(path: &Path) -> Result<FerSplits> {
    let file = std::fs::File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_fer_csv(std::io::BufReader::new(file)).map_err(|e| e.in_file(path))
}

/// Writes samples back out in FER2013 CSV form, quantising pixels to
/// `round(v * 255)`.
pub fn write_fer_csv<'d>(mut out: impl Write, splits: impl IntoIterator<Item = &'d Dataset>) -> Result<()> {
    writeln!(out, "emotion,pixels,Usage")?;
    for ds in splits {
        let usage = match ds.split {
            Split::Train => "Training",
            Split::Val => "PublicTest",
            Split::Test => "PrivateTest",
        };
        for s in &ds.samples {
            let pixels: Vec<String> = s
                .image
                .data()
                .iter()
                .map(|&v| ((v * 255.0).round() as u8).to_string())
                .collect();
            writeln!(out, "{},{},{usage}", s.label, pixels.join(" "))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: usize, pixels: &[u8], usage: &str) -> String {
        let p: Vec<String> = pixels.iter().map(|v| v.to_string()).collect();
        format!("{label},{},{usage}\n", p.join(" "))
    }

    #[test]
    fn zero_row_goes_to_train_split() {
        let csv = format!("emotion,pixels,Usage\n{}", row(3, &[0; FER_PIXELS], "Training"));
        let splits = parse_fer_csv(csv.as_bytes()).unwrap();
        assert_eq!(splits.train.len(), 1);
        assert_eq!(splits.train.samples[0].label, 3);
        assert!(splits.train.samples[0].image.data().iter().all(|&v| v == 0.0));
        assert!(splits.val.is_empty() && splits.test.is_empty());
    }

    #[test]
    fn pixels_are_divided_by_255() {
        let mut px = vec![0u8; FER_PIXELS];
        px[0] = 255;
        px[1] = 51;
        let csv = format!("emotion,pixels,Usage\n{}", row(0, &px, "PublicTest"));
        let splits = parse_fer_csv(csv.as_bytes()).unwrap();
        let img = splits.val.samples[0].image.data();
        assert_eq!(img[0], 1.0);
        assert!((img[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn short_row_names_its_line() {
        let csv = format!(
            "emotion,pixels,Usage\n{}{}",
            row(1, &[0; FER_PIXELS], "Training"),
            row(1, &[0; FER_PIXELS - 1], "Training")
        );
        let err = parse_fer_csv(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        assert!(err.to_string().contains("2303"));
    }

    #[test]
    fn validation_errors() {
        let bad_emotion = format!("emotion,pixels,Usage\n{}", row(7, &[0; FER_PIXELS], "Training"));
        assert!(matches!(parse_fer_csv(bad_emotion.as_bytes()), Err(Error::Csv { line: 2, .. })));
        let bad_usage = format!("emotion,pixels,Usage\n{}", row(0, &[0; FER_PIXELS], "Other"));
        assert!(parse_fer_csv(bad_usage.as_bytes()).is_err());
        let bad_pixel = "emotion,pixels,Usage\n0,256,Training\n";
        assert!(parse_fer_csv(bad_pixel.as_bytes()).unwrap_err().to_string().contains("256"));
        let extra_col = "emotion,pixels,Usage\n0,1,Training,x\n";
        assert!(parse_fer_csv(extra_col.as_bytes()).unwrap_err().to_string().contains("columns"));
        assert!(parse_fer_csv("a,b,c\n".as_bytes()).is_err());
    }
}
