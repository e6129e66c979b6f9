//! CIFAR binary records: one (CIFAR-10) or two (CIFAR-100, coarse then
//! fine) label bytes followed by 3072 planar RGB bytes.

pub const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Cifar10,
    Cifar100,
}

impl Variant {
    pub fn label_bytes(self) -> usize {
        match self {
            Variant::Cifar10 => 1,
            Variant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            Variant::Cifar10 => 10,
            Variant::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    /// The fine label for CIFAR-100.
    pub label: u8,
    /// Coarse label, CIFAR-100 only.
    pub coarse: Option<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse(bytes: &[u8], variant: Variant) -> Result<Vec<RawRecord>, String> {
    let len = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(len) {
        return Err(format!("{} bytes is not a whole number of {len}-byte records", bytes.len()));
    }
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, r)| {
            let (coarse, label) = match variant {
                Variant::Cifar10 => (None, r[0]),
                Variant::Cifar100 => (Some(r[0]), r[1]),
            };
            if usize::from(label) >= variant.classes() {
                return Err(format!("record {i}: label {label} out of range"));
            }
            Ok(RawRecord { label, coarse, pixels: r[variant.label_bytes()..].to_vec() })
        })
        .collect()
}

pub fn write(records: &[RawRecord], variant: Variant) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * variant.record_len());
    for r in records {
        if variant == Variant::Cifar100 {
            out.push(r.coarse.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}
