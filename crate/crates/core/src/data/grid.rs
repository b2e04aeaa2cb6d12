//! Monthly gridded fields and the IMGR file format.
//!
//! Layout: `"IMGR1\n"`, a little-endian `u32` header length, a UTF-8 JSON
//! header, the land mask (one byte per cell), the optional pole-hole mask,
//! then `T·H·W` little-endian `f32` values in `[t, y, x]` order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calendar::Month;
use crate::error::{Error, Result};

pub const IMGR_MAGIC: &[u8; 6] = b"IMGR1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct GridSeries {
    pub variable: String,
    pub units: String,
    /// Strictly increasing.
    pub months: Vec<Month>,
    /// `[T, H, W]`
    pub data: Array3<f32>,
    pub land_mask: Array2<bool>,
    pub pole_hole: Option<Array2<bool>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    variable: String,
    units: String,
    shape: [usize; 3],
    months: Vec<Month>,
    masks: Vec<String>,
    precision: String,
}

impl GridSeries {
    pub fn new(
        variable: impl Into<String>,
        units: impl Into<String>,
        months: Vec<Month>,
        data: Array3<f32>,
        land_mask: Array2<bool>,
    ) -> Result<Self> {
        let s = GridSeries {
            variable: variable.into(),
            units: units.into(),
            months,
            data,
            land_mask,
            pole_hole: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, h, w) = self.data.dim();
        if t != self.months.len() {
            return Err(Error::HeaderMismatch(format!("{} months for {t} fields", self.months.len())));
        }
        if self.land_mask.dim() != (h, w) {
            return Err(Error::shape("grid series", format!("land mask {:?} for fields {h}x{w}", self.land_mask.dim())));
        }
        if let Some(p) = &self.pole_hole {
            if p.dim() != (h, w) {
                return Err(Error::shape("grid series", format!("pole mask {:?} for fields {h}x{w}", p.dim())));
            }
        }
        if let Some(pair) = self.months.windows(2).find(|p| p[0] >= p[1]) {
            return Err(Error::invalid("month list", format!("{} followed by {}", pair[0], pair[1])));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.land_mask.dim()
    }

    pub fn index_of(&self, m: Month) -> Option<usize> {
        self.months.binary_search(&m).ok()
    }

    pub fn field(&self, m: Month) -> Option<ArrayView2<'_, f32>> {
        self.index_of(m).map(|i| self.data.index_axis(Axis(0), i))
    }

    /// Like [`GridSeries::field`] but names the missing month.
    pub fn require(&self, m: Month) -> Result<ArrayView2<'_, f32>> {
        self.field(m).ok_or_else(|| Error::MissingMonth { variable: self.variable.clone(), month: m })
    }

    /// Copy restricted to months in `[start, end]`.
    pub fn slice_months(&self, start: Month, end: Month) -> GridSeries {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.months[i] >= start && self.months[i] <= end).collect();
        GridSeries {
            months: idx.iter().map(|&i| self.months[i]).collect(),
            data: self.data.select(Axis(0), &idx),
            ..self.clone()
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        self.validate()?;
        let mut masks = vec!["land".to_string()];
        if self.pole_hole.is_some() {
            masks.push("pole_hole".into());
        }
        let header = Header {
            variable: self.variable.clone(),
            units: self.units.clone(),
            shape: self.data.dim().into(),
            months: self.months.clone(),
            masks,
            precision: "f32".into(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(IMGR_MAGIC)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        let mask_bytes = |m: &Array2<bool>| m.iter().map(|&b| b as u8).collect::<Vec<u8>>();
        out.write_all(&mask_bytes(&self.land_mask))?;
        if let Some(p) = &self.pole_hole {
            out.write_all(&mask_bytes(p))?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < IMGR_MAGIC.len() || &bytes[..IMGR_MAGIC.len()] != IMGR_MAGIC {
            return Err(Error::BadMagic("IMGR1"));
        }
        let mut pos = IMGR_MAGIC.len();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = *pos + n;
            if end > bytes.len() {
                return Err(Error::TruncatedPayload { expected: end, found: bytes.len() });
            }
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(&mut pos, len)?)?;
        if header.precision != "f32" {
            return Err(Error::HeaderMismatch(format!("unsupported precision {}", header.precision)));
        }
        let [t, h, w] = header.shape;
        if header.months.len() != t {
            return Err(Error::HeaderMismatch(format!("{} months listed for shape {:?}", header.months.len(), header.shape)));
        }
        let has_pole = match header.masks.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["land"] => false,
            ["land", "pole_hole"] => true,
            other => return Err(Error::HeaderMismatch(format!("unexpected masks {other:?}"))),
        };
        let cells = h * w;
        let to_mask = |b: &[u8]| Array2::from_shape_vec((h, w), b.iter().map(|&v| v != 0).collect()).expect("extent");
        let land_mask = to_mask(take(&mut pos, cells)?);
        let pole_hole = if has_pole { Some(to_mask(take(&mut pos, cells)?)) } else { None };
        let remaining = bytes.len() - pos;
        let expected = t * cells * 4;
        if remaining != expected {
            if remaining % (cells * 4).max(1) == 0 && remaining < expected {
                return Err(Error::HeaderMismatch(format!(
                    "header declares {t} fields, payload holds {}",
                    remaining / (cells * 4).max(1)
                )));
            }
            return Err(Error::TruncatedPayload { expected: pos + expected, found: bytes.len() });
        }
        let values: Vec<f32> =
            bytes[pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let series = GridSeries {
            variable: header.variable,
            units: header.units,
            months: header.months,
            data: Array3::from_shape_vec((t, h, w), values).expect("extent"),
            land_mask,
            pole_hole,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GridSeries {
        let months: Vec<Month> = (0..3).map(|i| Month::new(2000, 1).offset(i)).collect();
        let data = Array3::from_shape_fn((3, 2, 3), |(t, i, j)| (t * 10 + i * 3 + j) as f32 * 0.01);
        let land = Array2::from_shape_fn((2, 3), |(i, j)| i == 0 && j == 0);
        GridSeries::new("siconc", "1", months, data, land).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut s = sample();
        s.pole_hole = Some(Array2::from_elem((2, 3), false));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = GridSeries::from_bytes(&buf).unwrap();
        assert_eq!(back, s);
        let bits = |g: &GridSeries| g.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn distinct_diagnostics() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(GridSeries::from_bytes(&bad), Err(Error::BadMagic(_))));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(GridSeries::from_bytes(cut), Err(Error::TruncatedPayload { .. })));

        // one field short of what the header declares
        let short = &buf[..buf.len() - 2 * 3 * 4];
        assert!(matches!(GridSeries::from_bytes(short), Err(Error::HeaderMismatch(_))));
    }
}
