#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <boost/property_tree/ptree.hpp>

namespace secforge::detail {

// Removes ATT&CK-style "(Citation: ...)" markers and collapses whitespace.
std::string strip_citations(std::string_view text);

using Ptree = boost::property_tree::ptree;

// Parses XML into a property tree; throws ParseError on malformed input.
Ptree read_xml_tree(std::string_view doc);

// Concatenated text of an element and its descendants, whitespace-collapsed.
std::string xml_text(const Ptree& node);

std::string xml_attr(const Ptree& node, const char* name);

// Serializes a subtree back to XML (deterministic for identical trees).
std::string xml_fragment(const std::string& tag, const Ptree& node);

}  // namespace secforge::detail
