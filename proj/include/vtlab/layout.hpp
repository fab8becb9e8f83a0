#pragma once

#include <stdexcept>
#include <string>

namespace vtlab {

// Segment spans of a concatenated vision|text|response sequence.
// Spans are disjoint, ordered, and cover [0, total). The response span may
// be empty (pure prefix before decoding).
struct SequenceLayout {
  int vision_begin = 0;
  int vision_end = 0;
  int text_begin = 0;
  int text_end = 0;
  int response_begin = 0;
  int response_end = 0;

  int total() const { return response_end; }
  int vision_len() const { return vision_end - vision_begin; }
  int text_len() const { return text_end - text_begin; }
  int response_len() const { return response_end - response_begin; }

  static SequenceLayout make(int n_vision, int n_text, int n_response = 0) {
    SequenceLayout l;
    l.vision_begin = 0;
    l.vision_end = n_vision;
    l.text_begin = n_vision;
    l.text_end = n_vision + n_text;
    l.response_begin = l.text_end;
    l.response_end = l.text_end + n_response;
    l.validate();
    return l;
  }

  void validate() const {
    if (vision_begin != 0 || vision_end < vision_begin || text_begin != vision_end ||
        text_end < text_begin || response_begin != text_end || response_end < response_begin)
      throw std::invalid_argument("SequenceLayout: spans must be ordered and contiguous");
    if (vision_len() <= 0)
      throw std::invalid_argument("SequenceLayout: missing vision span");
    if (text_len() <= 0) throw std::invalid_argument("SequenceLayout: missing text span");
  }
};

}  // namespace vtlab
