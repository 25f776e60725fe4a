"""One-shot adaptation of a miniature style-based generator.

Given a single reference image plus a binary entity mask, the package tunes a
pretrained toy generator so its samples pick up the reference's global style
and local entity while keeping source/target syntheses in correspondence.
"""

__version__ = "0.1.0"
