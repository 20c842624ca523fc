"""Frozen 8x12 bitmap glyphs for ASCII 32..126 (one byte per row,
MSB = leftmost pixel). Rasterized once from a monospace outline font
and pinned here so rendered screens are bit-stable."""

CELL_W = 8
CELL_H = 12
FIRST = 32
LAST = 126

GLYPHS = bytes.fromhex(
    "000000000000000000000000001010101010100010100000002828280000000000000000"
    "000014247e2828fc485000000010385450701c14543810100060909064186c12120c0000"
    "001c202030304a4e643a00000010101000000000000000000c0808101010101008080c00"
    "301010080808080810103000001054383854100000000000000000101010fe1010100000"
    "000000000000000010102000000000000000380000000000000000000000000010100000"
    "000204040808101020204000003c2442424a4242243c00000070101010101010107c0000"
    "003c420202040810207e0000003c4202021c0202423c0000000c0c143424447e04040000"
    "007c40407c060202463c0000001c22405c664242263c0000007e06040408081010200000"
    "003c4242423c4242423c0000003c644242463a0244380000000000001010000010100000"
    "000000001010000010102000000000021c60601c0200000000000000007e007e00000000"
    "000000403806063840000000001c22020c1810001010000000001c26424e52524e60201c"
    "001818182424243c42420000007c4242427c4242427c0000001c224040404040221c0000"
    "007844424242424244780000007e4040407e4040407e0000007e4040407e404040400000"
    "001c224040464242221c000000424242427e424242420000007c101010101010107c0000"
    "001c04040404040444380000004244485070484c444200000040404040404040407e0000"
    "004266665a5a5a424242000000626252525a4a4a46460000003c244242424242243c0000"
    "007c4242427c404040400000003c244242424242263c0404007c4242427c444242410000"
    "003c4240603c0202423c000000fe101010101010101000000042424242424242423c0000"
    "00424224242424181818000000829292aaaaaa6c44440000004224241818182424420000"
    "008244282810101010100000007e060408181020607e0000181010101010101010101800"
    "004020201010080804040200301010101010101010103000003048840000000000000000"
    "0000000000000000000000001008000000000000000000000000003844043c44443c0000"
    "4040407844444444447800000000003864404040603c00000404043c44444444443c0000"
    "0000003864447c40443800000c10107c10101010101000000000003c44444444443c0424"
    "4040405864444444444400001000007010101010107c0000080000380808080808080808"
    "4040404448506050484400007010101010101010100c00000000007c5454545454540000"
    "000000586444444444440000000000384444444444380000000000784444444444784040"
    "0000003c44444444443c04040000003c3220202020200000000000384440380444380000"
    "0010107c10101010101c00000000004444444444443c0000000000444428282810100000"
    "000000828254546c28280000000000442828102828440000000000444428282830101020"
    "0000007c04081020407c00001c1010101060101010101c00101010101010101010101010"
    "70101010100c1010101070000000000000700e0000000000"
)


def glyph_rows(ch):
    """12 row-bytes for a character; unknown chars render as space."""
    code = ord(ch)
    if not FIRST <= code <= LAST:
        code = FIRST
    off = (code - FIRST) * CELL_H
    return GLYPHS[off : off + CELL_H]
