"""Camera, focal and video-depth recovery from flows and mono-depth priors in dynamic scenes."""

__version__ = "0.1.0"
