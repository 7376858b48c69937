"""Exception types raised by apmkit."""


class ApmkitError(Exception):
    """Base class for all apmkit errors."""


class RasterFormatError(ApmkitError, ValueError):
    """A raster header or payload is malformed or inconsistent."""


class SiteTableError(ApmkitError, ValueError):
    """A site table violates its invariants."""

    def __init__(self, message, site_ids=()):
        super().__init__(message)
        self.site_ids = list(site_ids)


class InfeasibleError(ApmkitError, ValueError):
    """A sampling or placement constraint cannot be satisfied."""


class BandError(ApmkitError, KeyError):
    """A required band is missing or a band selection is invalid."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class EmptyAnnulusError(ApmkitError, ValueError):
    """An annulus contained no valid pixels around a site."""

    def __init__(self, annulus, r_in, r_out, site_id=None):
        self.annulus = annulus
        self.r_in = r_in
        self.r_out = r_out
        self.site_id = site_id
        where = f" at site {site_id!r}" if site_id is not None else ""
        super().__init__(
            f"annulus {annulus} (r_in={r_in}, r_out={r_out}) has no valid pixels{where}"
        )


class ModelError(ApmkitError, ValueError):
    """A model cannot be fitted or applied to the given data."""
