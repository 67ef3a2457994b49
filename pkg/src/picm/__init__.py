"""picm: content-weighted variable-rate feature compression with prompt-driven
bit allocation and parameter-efficient downstream transfer."""

__version__ = "0.1.0"
