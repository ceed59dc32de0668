//! Frame resampling helpers backed by the `image` crate.

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::domain::FrameTensor;

fn to_image(frame: &FrameTensor) -> RgbImage {
    RgbImage::from_raw(frame.width(), frame.height(), frame.data().to_vec()).expect("length checked by FrameTensor")
}

fn from_image(img: RgbImage) -> FrameTensor {
    let (w, h) = img.dimensions();
    FrameTensor::new(h, w, img.into_raw()).expect("non-empty image")
}

/// Bilinear resize. Returns a clone when the size already matches.
pub fn resize_bilinear(frame: &FrameTensor, height: u32, width: u32) -> FrameTensor {
    if frame.height() == height && frame.width() == width {
        return frame.clone();
    }
    from_image(imageops::resize(&to_image(frame), width, height, FilterType::Triangle))
}

/// Largest centred window of `frame` whose aspect ratio equals `height:width`.
pub fn center_crop_to_aspect(frame: &FrameTensor, height: u32, width: u32) -> FrameTensor {
    let (fh, fw) = (u64::from(frame.height()), u64::from(frame.width()));
    let (th, tw) = (u64::from(height), u64::from(width));
    // Compare fw/fh against tw/th without floating point.
    let (ch, cw) = if fw * th > tw * fh {
        (fh, (fh * tw / th).max(1))
    } else {
        ((fw * th / tw).max(1), fw)
    };
    if (ch, cw) == (fh, fw) {
        return frame.clone();
    }
    let x0 = ((fw - cw) / 2) as u32;
    let y0 = ((fh - ch) / 2) as u32;
    from_image(imageops::crop_imm(&to_image(frame), x0, y0, cw as u32, ch as u32).to_image())
}

/// Crop to the target aspect ratio, then resize to the target resolution.
pub fn crop_and_resize(frame: &FrameTensor, height: u32, width: u32) -> FrameTensor {
    resize_bilinear(&center_crop_to_aspect(frame, height, width), height, width)
}
