//! IDX containers: big-endian magic `0x0000_08NN` (unsigned bytes, `NN`
//! dimensions), then one big-endian `u32` per dimension, then data.

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, String> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| "truncated header".to_string())
}

fn parse(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8]), String> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(format!("magic {found:#010x}, expected {magic:#010x}"));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let body = &bytes[4 + 4 * ndim..];
    let expect: usize = dims.iter().product();
    if body.len() != expect {
        return Err(format!("{} data bytes for dimensions {dims:?}", body.len()));
    }
    Ok((dims, body))
}

/// Images as `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), String> {
    let (d, body) = parse(bytes, IMAGES_MAGIC)?;
    Ok((d[0], d[1], d[2], body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, String> {
    Ok(parse(bytes, LABELS_MAGIC)?.1.to_vec())
}

fn write(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

pub fn write_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    write(IMAGES_MAGIC, &[count, rows, cols], pixels)
}

pub fn write_labels(labels: &[u8]) -> Vec<u8> {
    write(LABELS_MAGIC, &[labels.len()], labels)
}
