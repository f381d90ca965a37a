//! 5×7 bitmap glyphs; each row is the low five bits of a byte, MSB left.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

const GLYPHS: &[(char, [u8; 7])] = &[
    (' ', [0, 0, 0, 0, 0, 0, 0]),
    ('a', [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('b', [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E]),
    ('c', [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E]),
    ('d', [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E]),
    ('e', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F]),
    ('f', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10]),
    ('g', [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F]),
    ('h', [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('i', [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('j', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C]),
    ('k', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('l', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F]),
    ('m', [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('n', [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11]),
    ('o', [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('p', [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10]),
    ('q', [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D]),
    ('r', [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11]),
    ('s', [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E]),
    ('t', [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('u', [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('v', [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04]),
    ('w', [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A]),
    ('x', [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11]),
    ('y', [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04]),
    ('z', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F]),
    ('0', [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E]),
    ('1', [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('2', [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F]),
    ('3', [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E]),
    ('4', [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02]),
    ('5', [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E]),
    ('6', [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E]),
    ('7', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E]),
    ('9', [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C]),
    ('.', [0, 0, 0, 0, 0, 0x0C, 0x0C]),
    (',', [0, 0, 0, 0, 0x0C, 0x04, 0x08]),
    ('-', [0, 0, 0, 0x1F, 0, 0, 0]),
    ('\'', [0x04, 0x04, 0x08, 0, 0, 0, 0]),
    ('!', [0x04, 0x04, 0x04, 0x04, 0x04, 0, 0x04]),
    ('?', [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04]),
];

pub fn glyph(c: char) -> Option<&'static [u8; 7]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, rows)| rows)
}

pub fn supported() -> impl Iterator<Item = char> {
    GLYPHS.iter().map(|(c, _)| *c)
}
