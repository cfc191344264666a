//! On-tier subgroup file layout.
//!
//! ```text
//! offset  size  field
//!      0     4  magic         0x4D4C504F ("MLPO" as a little-endian u32)
//!      4     2  version
//!      6     2  element_kind  0 = f32
//!      8     4  subgroup_id
//!     12     8  param_count
//!     20    12  reserved      three zero u32
//!     32     -  payload       tensors back to back, little-endian
//! ```
//!
//! State files carry params, momentum and variance; gradient files carry a
//! single FP32 gradient tensor.

pub const MAGIC: u32 = 0x4D4C_504F;
pub const VERSION: u16 = 1;
pub const ELEMENT_F32: u16 = 0;
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubgroupHeader {
    pub magic: u32,
    pub version: u16,
    pub element_kind: u16,
    pub subgroup_id: u32,
    pub param_count: u64,
    pub reserved: [u32; 3],
}

impl SubgroupHeader {
    pub fn new(subgroup_id: u32, param_count: u64) -> Self {
        Self {
            magic: MAGIC,
            version: VERSION,
            element_kind: ELEMENT_F32,
            subgroup_id,
            param_count,
            reserved: [0; 3],
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&self.magic.to_le_bytes());
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.element_kind.to_le_bytes());
        b[8..12].copy_from_slice(&self.subgroup_id.to_le_bytes());
        b[12..20].copy_from_slice(&self.param_count.to_le_bytes());
        for (k, r) in self.reserved.iter().enumerate() {
            b[20 + 4 * k..24 + 4 * k].copy_from_slice(&r.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() < HEADER_LEN {
            return None;
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        Some(Self {
            magic: u32_at(0),
            version: u16_at(4),
            element_kind: u16_at(6),
            subgroup_id: u32_at(8),
            param_count: u64::from_le_bytes(b[12..20].try_into().unwrap()),
            reserved: [u32_at(20), u32_at(24), u32_at(28)],
        })
    }
}

/// Serializes `tensors` (all of equal length) into a complete file image.
pub fn encode(subgroup_id: u32, tensors: &[&[f32]]) -> Vec<u8> {
    let n = tensors.first().map_or(0, |t| t.len());
    debug_assert!(tensors.iter().all(|t| t.len() == n));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * tensors.len());
    out.extend_from_slice(&SubgroupHeader::new(subgroup_id, n as u64).to_bytes());
    for t in tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a file image into `dests`, resizing each to the stored length.
pub fn decode(bytes: &[u8], subgroup_id: u32, dests: &mut [&mut Vec<f32>]) -> Result<(), String> {
    let h = SubgroupHeader::from_bytes(bytes).ok_or("truncated header")?;
    if h.magic != MAGIC {
        return Err(format!("bad magic {:#010x}", h.magic));
    }
    if h.version != VERSION {
        return Err(format!("unsupported version {}", h.version));
    }
    if h.element_kind != ELEMENT_F32 {
        return Err(format!("unsupported element kind {}", h.element_kind));
    }
    if h.subgroup_id != subgroup_id {
        return Err(format!("expected subgroup {subgroup_id}, found {}", h.subgroup_id));
    }
    let n = usize::try_from(h.param_count).map_err(|_| "param_count overflow")?;
    let want = HEADER_LEN + 4 * n * dests.len();
    if bytes.len() != want {
        return Err(format!("payload is {} bytes, expected {want}", bytes.len()));
    }
    let payload = &bytes[HEADER_LEN..];
    for (k, dst) in dests.iter_mut().enumerate() {
        let src = &payload[4 * n * k..4 * n * (k + 1)];
        dst.clear();
        dst.extend(
            src.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    Ok(())
}
