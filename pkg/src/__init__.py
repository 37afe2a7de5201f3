# mmccd src package
