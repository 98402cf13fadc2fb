"""Sound synthesis from rendered onomatopoeia text.

Pipeline: render text as a monospaced bitmap, stretch its width to encode
duration, slice it into fixed-size character tokens, and drive a
duration-explicit acoustic model that emits mel spectrograms, inverted to
audio with Griffin-Lim.
"""

__version__ = "0.1.0"
