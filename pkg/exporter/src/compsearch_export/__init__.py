from .export import ExportError, ExportJob, export

__all__ = ["ExportError", "ExportJob", "export"]
