"""glyphforge: caption-driven glyph synthesis and radical-aligned font transfer."""

__version__ = "0.1.0"
