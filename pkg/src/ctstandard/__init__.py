"""CT image standardization: a patch GAN, DICOM reconstruction and GLCM evaluation."""

__version__ = "0.1.0"
