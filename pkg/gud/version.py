# Do not edit by hand, this is bumped at release time.
# pylint: skip-file
#
version = "0.1.0"
release_date = "2024-11-04 10:12:41.517310"
