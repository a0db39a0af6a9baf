"""ragmark: build a QA system over a crawled website corpus and measure
answer quality across question categories and top-k sweeps.
"""

__version__ = "0.1.0"
