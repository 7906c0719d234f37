//! Volume ingestion, patient-level splitting and slice extraction.

mod dicom;
mod manifest;
mod slicing;
mod split;
mod volume;

pub use dicom::{load_dicom_series, write_dicom_series};
pub use manifest::{read_manifest, write_manifest, SliceRecord};
pub use slicing::{
    crop_or_pad, extract_inplane_slices, extract_throughplane_slices, stack_inplane_slices,
    stack_throughplane_slices, ThroughAxis,
};
pub use split::{split_patients, DatasetSplit, PatientEntry, SplitSpec};
pub use volume::{load_volume, normalize_intensity, AcquisitionPlane, Volume, VOLUME_EXTENSION};
