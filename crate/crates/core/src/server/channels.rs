use crate::{ChannelId, ItemId};

/// Dissemination-controller channel assignment: item `i` goes to channel
/// `i mod n_channels`. The mapping is fixed for the whole run.
pub fn assign_channels(n_items: usize, n_channels: u32) -> Vec<ChannelId> {
    assert!(n_channels >= 1, "at least one channel is required");
    (0..n_items).map(|i| (i as u32) % n_channels).collect()
}

/// Items of each channel, in ascending id order.
pub fn channel_groups(assignment: &[ChannelId], n_channels: u32) -> Vec<Vec<ItemId>> {
    let mut groups = vec![Vec::new(); n_channels as usize];
    for (item, ch) in assignment.iter().enumerate() {
        groups[*ch as usize].push(item as ItemId);
    }
    groups
}
