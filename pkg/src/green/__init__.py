"""Graph residual re-ranking of classifier scores with a learned class-dependency prior."""

__version__ = "0.1.0"
