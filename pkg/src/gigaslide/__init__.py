"""Gigapixel slide annotation platform: tile pyramids, collaborative
annotation storage, a teacher-student patch classifier, and a heatmap to
polygon proposal pipeline, exposed over HTTP and a CLI."""

__version__ = "0.1.0"
