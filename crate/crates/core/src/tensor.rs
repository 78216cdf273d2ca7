use crate::error::{Result, SalError};

/// Dense H×W×C array in row-major, channel-last order.
///
/// Holds raw image intensities (0..255 at ingestion) or real-valued feature
/// responses from hop units; both share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(SalError::InvalidInput(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        debug_assert!(row < self.height && col < self.width && ch < self.channels);
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// All channels at one spatial position.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let base = (row * self.width + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Checks the exact spatial/channel shape, reporting a shape mismatch otherwise.
    pub fn expect_shape(&self, height: usize, width: usize, channels: usize) -> Result<()> {
        if self.height != height || self.width != width || self.channels != channels {
            return Err(SalError::InvalidInput(format!(
                "expected {}x{}x{} tensor, got {}x{}x{}",
                height, width, channels, self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 12]).is_ok());
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn channel_last_indexing() {
        let mut t = ImageTensor::zeros(2, 3, 2);
        t.set(1, 2, 1, 7.0);
        assert_eq!(t.data()[(1 * 3 + 2) * 2 + 1], 7.0);
        assert_eq!(t.get(1, 2, 1), 7.0);
        assert_eq!(t.pixel(1, 2), &[0.0, 7.0]);
    }
}
