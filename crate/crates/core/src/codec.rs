//! Binary layout of a [`CycleFrame`], little-endian throughout:
//!
//! ```text
//! header   [channel: u32][cycle: u64]
//! entry    [item_id: u32][offset: u32][size: u32][last_updated_cycle: u64][updated_flag: u8]
//! payload  size words of u32 per item, each word carrying the item version
//! ```
//!
//! The entry count is not stored. The decoder reads entries until the bytes
//! left equal the payload size implied by the entries read so far; leftover
//! entries always make the remainder strictly larger, so the split is unique.

use thiserror::Error;

use crate::model::{CycleFrame, FrameLayout, IndexEntry};

pub const HEADER_BYTES: usize = 4 + 8;
pub const ENTRY_BYTES: usize = 4 + 4 + 4 + 8 + 1;
pub const WORD_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("frame truncated: {0} bytes")]
    Truncated(usize),
    #[error("item {item} version {value} does not fit a payload word")]
    ValueTooLarge { item: u32, value: u64 },
    #[error("entry {position}: offset {found}, expected {expected}")]
    BadOffset {
        position: usize,
        found: u32,
        expected: u64,
    },
    #[error("entry {position}: invalid updated flag byte {byte}")]
    BadFlag { position: usize, byte: u8 },
    #[error("payload words of item {item} disagree")]
    BadPayload { item: u32 },
}

pub fn encode(frame: &CycleFrame) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(
        HEADER_BYTES
            + frame.index.len() * ENTRY_BYTES
            + frame.payload_length as usize * WORD_BYTES,
    );
    out.extend_from_slice(&frame.channel.to_le_bytes());
    out.extend_from_slice(&frame.cycle.to_le_bytes());
    for e in &frame.index {
        out.extend_from_slice(&e.item_id.to_le_bytes());
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.size.to_le_bytes());
        out.extend_from_slice(&e.last_updated_cycle.to_le_bytes());
        out.push(u8::from(e.updated_flag));
    }
    for (e, value) in frame.index.iter().zip(&frame.values) {
        let word = u32::try_from(*value).map_err(|_| CodecError::ValueTooLarge {
            item: e.item_id,
            value: *value,
        })?;
        for _ in 0..e.size {
            out.extend_from_slice(&word.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or(CodecError::Truncated(self.buf.len()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes a frame. `layout` supplies the unit sizes, which are not part of
/// the byte representation.
pub fn decode(bytes: &[u8], layout: FrameLayout) -> Result<CycleFrame, CodecError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let channel = r.u32()?;
    let cycle = r.u64()?;

    let mut index = Vec::new();
    let mut payload: u64 = 0;
    while r.remaining() as u64 != payload * WORD_BYTES as u64 {
        if r.remaining() < ENTRY_BYTES {
            return Err(CodecError::Truncated(bytes.len()));
        }
        let position = index.len();
        let item_id = r.u32()?;
        let offset = r.u32()?;
        let size = r.u32()?;
        let last_updated_cycle = r.u64()?;
        let [flag] = r.take::<1>()?;
        if u64::from(offset) != payload {
            return Err(CodecError::BadOffset {
                position,
                found: offset,
                expected: payload,
            });
        }
        let updated_flag = match flag {
            0 => false,
            1 => true,
            byte => return Err(CodecError::BadFlag { position, byte }),
        };
        index.push(IndexEntry {
            item_id,
            offset,
            size,
            last_updated_cycle,
            updated_flag,
        });
        payload += u64::from(size);
    }

    let mut values = Vec::with_capacity(index.len());
    for e in &index {
        let mut value = None;
        for _ in 0..e.size {
            let w = r.u32()?;
            match value {
                None => value = Some(w),
                Some(v) if v != w => return Err(CodecError::BadPayload { item: e.item_id }),
                Some(_) => {}
            }
        }
        values.push(u64::from(value.unwrap_or(0)));
    }

    Ok(CycleFrame {
        channel,
        cycle,
        index,
        values,
        payload_length: payload,
        header_length: layout.header_units,
        entry_size: layout.entry_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_cycle_frame, DataItem};

    #[test]
    fn golden_bytes_for_two_items() {
        let mut a = DataItem::new(1, 1);
        a.value = 3;
        a.last_updated_cycle = 2;
        a.last_disseminated_cycle = 1;
        let b = DataItem::new(4, 2);
        let frame = build_cycle_frame(&mut [a, b], 7, 5, FrameLayout::default()).unwrap();
        let bytes = encode(&frame).unwrap();
        #[rustfmt::skip]
        let expected: Vec<u8> = vec![
            7, 0, 0, 0,  5, 0, 0, 0, 0, 0, 0, 0,
            1, 0, 0, 0,  0, 0, 0, 0,  1, 0, 0, 0,  2, 0, 0, 0, 0, 0, 0, 0,  1,
            4, 0, 0, 0,  1, 0, 0, 0,  2, 0, 0, 0,  0, 0, 0, 0, 0, 0, 0, 0,  0,
            3, 0, 0, 0,
            0, 0, 0, 0,  0, 0, 0, 0,
        ];
        assert_eq!(bytes, expected);
        assert_eq!(decode(&bytes, FrameLayout::default()).unwrap(), frame);
    }

    #[test]
    fn header_only_frame() {
        let frame = build_cycle_frame(&mut [], 2, 9, FrameLayout::default()).unwrap();
        let bytes = encode(&frame).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(decode(&bytes, FrameLayout::default()).unwrap(), frame);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut items = vec![DataItem::new(0, 3)];
        let frame = build_cycle_frame(&mut items, 0, 1, FrameLayout::default()).unwrap();
        let bytes = encode(&frame).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], FrameLayout::default()).is_err());
        assert!(decode(&bytes[..5], FrameLayout::default()).is_err());
    }

    #[test]
    fn oversized_value_is_rejected() {
        let mut item = DataItem::new(0, 1);
        item.value = u64::from(u32::MAX) + 1;
        let frame = build_cycle_frame(&mut [item], 0, 1, FrameLayout::default()).unwrap();
        assert!(matches!(
            encode(&frame),
            Err(CodecError::ValueTooLarge { .. })
        ));
    }
}
