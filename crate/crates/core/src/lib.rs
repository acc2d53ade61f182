//! Solar nowcasting from geostationary satellite windows.
//!
//! Channel forecasters (persistence, flattened-window trees and forests, and a
//! CNN-LSTM) predict the next visible-channel reflectances at a site; a per-site
//! regressor maps current power, forecast channels and temperature to next-step
//! power. Evaluation follows the usual persistence-relative skill protocol over
//! tolerance buckets, and a synthetic cloud-advection world stands in for real data.

pub mod autodiff;
pub mod dataset;
pub mod geo;
pub mod metrics;
pub mod sitecube;
pub mod models;
pub mod nowcast;
pub mod svr;
pub mod synth;
