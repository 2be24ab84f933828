from branchmerge.cli import main

raise SystemExit(main())
