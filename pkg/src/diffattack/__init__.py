"""Naturalistic targeted adversarial images via masked style transfer.

Stage 1 restyles a masked region of a content image with a style image
(typically from a text-to-image service); stage 2 keeps optimising the same
pixels under content, style, cross-entropy and smoothness terms until a
pretrained classifier reports the target class.
"""

__version__ = "0.1.0"
